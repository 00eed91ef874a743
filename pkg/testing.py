import os
import sys
import unittest
from argparse import ArgumentParser

from fmkit.cli_test import CliTestCase
from fmkit.data.dataset_test import DatasetTestCase
from fmkit.data.features_test import FeaturesTestCase
from fmkit.data.synth_test import SynthTestCase
from fmkit.encoders.blocks_test import BlocksTestCase
from fmkit.encoders.mamba_test import MambaTestCase
from fmkit.metrics.bench_test import BenchTestCase
from fmkit.metrics.eer_test import EERTestCase
from fmkit.pipeline.checkpoint_test import CheckpointTestCase
from fmkit.pipeline.model_test import ModelTestCase
from fmkit.ssm.discretization_test import DiscretizationTestCase
from fmkit.ssm.scan_test import ScanTestCase
from fmkit.tensor.ops_test import OpsTestCase
from fmkit.training.gradcheck_test import GradcheckTestCase
from fmkit.training.optim_test import OptimTestCase
from fmkit.training.trainer_test import TrainerTestCase
from fmkit.utils.config_test import ConfigTestCase
from fmkit.utils.runtime_test import RuntimeTestCase

if __name__ == '__main__':
    ap = ArgumentParser(description='runs the unit tests for the rest of the project', add_help=False)
    ap.add_argument('--slow', action='store_true', help='also runs the timing-dependent scaling checks')
    args, rest = ap.parse_known_args()

    if args.slow:
        os.environ['FMKIT_SLOW_TESTS'] = '1'

    unittest.main(argv=[sys.argv[0]] + rest)
