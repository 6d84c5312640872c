"""
Directional desk-scale experiments on the reference configs in experiments/.
They take minutes, so they only run with FFCIL_EXPERIMENTS=1.
"""
import os
import tempfile
import unittest

from experiment import apply_overrides, load_config
from simrunner import run_sweep


EXPERIMENTS = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "experiments")


def reference_config(name, *overrides):
    return apply_overrides(load_config(os.path.join(EXPERIMENTS, name)), list(overrides))


def mean_std(runs, variant, kind):
    rows = runs[(runs["variant"] == variant) & (runs["schedule_kind"] == kind) & (runs["status"] == "ok")]
    return rows["A_T"].mean(), rows["A_T"].std(), rows["forgetting"].mean()


@unittest.skipUnless(os.environ.get("FFCIL_EXPERIMENTS") == "1", "set FFCIL_EXPERIMENTS=1 to run experiments")
class TestFreeFlowExperiments(unittest.TestCase):
    def test_reference_configs_share_the_setup(self):
        equal_vs_freeflow = reference_config("equal_vs_freeflow.toml")
        family = reference_config("schedule_family.toml")
        self.assertEqual(equal_vs_freeflow.train, family.train)
        self.assertEqual(equal_vs_freeflow.dataset._replace(num_classes=16), family.dataset)
        self.assertEqual(len(equal_vs_freeflow.run.seeds), 10)

    def test_equal_versus_free_flow(self):
        config = reference_config("equal_vs_freeflow.toml", "method.presets=[\"kd_replay\"]", "run.jobs=1")
        with tempfile.TemporaryDirectory() as out:
            runs, _ = run_sweep(config, out=out, progress=False)
        self.assertTrue((runs["status"] == "ok").all(), list(runs["error"]))
        equ, equ_std, _ = mean_std(runs, "equ_t", "equal")
        org, org_std, org_forgetting = mean_std(runs, "ff_org", "explicit")
        ours, ours_std, ours_forgetting = mean_std(runs, "ff_ours", "explicit")
        summary = "Equ.T {:.4f}±{:.4f} FF.org {:.4f}±{:.4f} FF.ours {:.4f}±{:.4f}".format(
            equ, equ_std, org, org_std, ours, ours_std)
        self.assertTrue(0.6 <= equ <= 0.9, summary)
        self.assertLess(org, equ - org_std, summary)
        self.assertGreater(ours, org + org_std, summary)
        self.assertLessEqual(ours_forgetting, org_forgetting, summary)

    def test_descending_gap_narrows(self):
        config = reference_config("schedule_family.toml", "schedule.kinds=[\"equal\", \"descending\"]",
                                  "method.variants=[\"ff_org\", \"ff_ours\"]",
                                  "run.jobs=1")
        with tempfile.TemporaryDirectory() as out:
            runs, _ = run_sweep(config, out=out, progress=False)
        self.assertTrue((runs["status"] == "ok").all(), list(runs["error"]))
        # each method against itself on the equal split; ff_org there is Equ.T
        org_gap = mean_std(runs, "ff_org", "equal")[0] - mean_std(runs, "ff_org", "descending")[0]
        ours_gap = mean_std(runs, "ff_ours", "equal")[0] - mean_std(runs, "ff_ours", "descending")[0]
        self.assertLess(abs(ours_gap), abs(org_gap), "gap FF.org {:.4f} FF.ours {:.4f}".format(org_gap, ours_gap))


if __name__ == "__main__":
    unittest.main()
