#!/usr/bin/env python3
"""Black-box contract tests for the leakmem CLI: exit codes, artifacts, determinism."""

import argparse
import csv
import json
import os
import shutil
import subprocess
import sys
import unittest

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, HERE)
import read_checkpoint  # noqa: E402

CLI = None
WORK = None


def run(*args, env=None):
    full_env = dict(os.environ)
    full_env.pop("LEAKMEM_SEED", None)
    full_env.update(env or {})
    return subprocess.run([CLI, *args], capture_output=True, text=True, env=full_env)


def write_config(name, doc):
    path = os.path.join(WORK, name)
    with open(path, "w") as f:
        json.dump(doc, f)
    return path


def small(seed=1, **flags):
    doc = {"seed": seed, "train": {"steps": 40, "heldout_every": 10, "heldout_pairs": 8}, "model": {"slots": 16}}
    if flags:
        doc["train"]["flags"] = flags
    return doc


def read(path, mode="rb"):
    with open(path, mode) as f:
        return f.read()


_trained = {}


def trained(tag, doc):
    """Train once per tag and reuse the run directory."""
    if tag not in _trained:
        out = os.path.join(WORK, tag)
        shutil.rmtree(out, ignore_errors=True)
        r = run("train", "--config", write_config(tag + ".json", doc), "--out", out)
        assert r.returncode == 0, r.stderr
        _trained[tag] = out
    return _trained[tag]


class ConfigErrors(unittest.TestCase):
    def expect_field(self, doc, field):
        r = run("train", "--config", write_config("bad.json", doc), "--out", os.path.join(WORK, "bad"))
        self.assertEqual(r.returncode, 2, r.stderr)
        self.assertIn(field, r.stderr)

    def test_missing_seed(self):
        self.expect_field({"train": {"steps": 5}}, "seed")

    def test_missing_steps(self):
        self.expect_field({"seed": 1, "train": {}}, "train.steps")

    def test_unknown_field_path(self):
        doc = small()
        doc["model"]["slotz"] = 3
        self.expect_field(doc, "model.slotz")

    def test_invalid_value(self):
        doc = small()
        doc["model"]["d_c"] = 4096
        self.expect_field(doc, "model.d_c")

    def test_malformed_json(self):
        path = os.path.join(WORK, "malformed.json")
        with open(path, "w") as f:
            f.write("{ seed: ")
        r = run("train", "--config", path, "--out", os.path.join(WORK, "bad"))
        self.assertEqual(r.returncode, 2)

    def test_bad_seed_override(self):
        r = run("train", "--config", write_config("ok.json", small()), "--out", os.path.join(WORK, "bad"),
                env={"LEAKMEM_SEED": "abc"})
        self.assertEqual(r.returncode, 2)
        self.assertIn("LEAKMEM_SEED", r.stderr)


class Train(unittest.TestCase):
    def test_artifacts(self):
        out = trained("full", small())
        for name in ("metrics.jsonl", "alignment.jsonl", "config.json", "checkpoint.lkm"):
            self.assertTrue(os.path.exists(os.path.join(out, name)), name)
        lines = [json.loads(l) for l in read(os.path.join(out, "metrics.jsonl"), "r").splitlines()]
        self.assertEqual([l["step"] for l in lines], list(range(40)))
        for key in ("L_rec", "L_adv", "L_dis", "L_dmem", "L_align", "total"):
            self.assertIn(key, lines[0])
        kl = [json.loads(l) for l in read(os.path.join(out, "alignment.jsonl"), "r").splitlines()]
        self.assertEqual([k["step"] for k in kl], [10, 20, 30, 40])
        self.assertEqual(json.loads(read(os.path.join(out, "config.json"), "r"))["seed"], 1)

    def test_rerun_is_identical(self):
        first = trained("full", small())
        again = os.path.join(WORK, "full_again")
        shutil.rmtree(again, ignore_errors=True)
        r = run("train", "--config", write_config("again.json", small()), "--out", again)
        self.assertEqual(r.returncode, 0, r.stderr)
        for name in ("metrics.jsonl", "alignment.jsonl", "checkpoint.lkm"):
            self.assertEqual(read(os.path.join(first, name)), read(os.path.join(again, name)), name)

    def test_seed_override(self):
        out = os.path.join(WORK, "seeded")
        shutil.rmtree(out, ignore_errors=True)
        r = run("train", "--config", write_config("seeded.json", small()), "--out", out, env={"LEAKMEM_SEED": "17"})
        self.assertEqual(r.returncode, 0, r.stderr)
        self.assertEqual(json.loads(read(os.path.join(out, "config.json"), "r"))["seed"], 17)
        self.assertNotEqual(read(os.path.join(out, "checkpoint.lkm")),
                            read(os.path.join(trained("full", small()), "checkpoint.lkm")))

    def test_numeric_abort(self):
        doc = small()
        doc["train"]["lr"] = 1e30
        out = os.path.join(WORK, "diverged")
        r = run("train", "--config", write_config("diverged.json", doc), "--out", out)
        self.assertEqual(r.returncode, 3, r.stderr)
        self.assertIn("at step", r.stderr)
        self.assertFalse(os.path.exists(os.path.join(out, "checkpoint.lkm")))

    def test_no_alignment_log_without_edi(self):
        out = trained("no_edi", small(edi_on=False))
        self.assertFalse(os.path.exists(os.path.join(out, "alignment.jsonl")))
        lines = [json.loads(l) for l in read(os.path.join(out, "metrics.jsonl"), "r").splitlines()]
        self.assertNotIn("L_align", lines[0])


class CheckpointErrors(unittest.TestCase):
    def damaged(self, name, data):
        path = os.path.join(WORK, name)
        with open(path, "wb") as f:
            f.write(data)
        return path

    def test_truncated(self):
        data = read(os.path.join(trained("full", small()), "checkpoint.lkm"))
        path = self.damaged("truncated.lkm", data[: len(data) // 2])
        for args in (("eval", "--ckpt", path), ("probe", "--ckpt", path, "--setting", "self"),
                     ("memory-inspect", "--ckpt", path)):
            r = run(*args)
            self.assertEqual(r.returncode, 4, args)
            self.assertIn("bytes", r.stderr)

    def test_version_mismatch(self):
        data = read(os.path.join(trained("full", small()), "checkpoint.lkm"))
        header, tensors = read_checkpoint.decode(data)
        header = dict(header)
        out = read_checkpoint.encode(header, tensors)
        hlen = int.from_bytes(out[8:16], "little")
        text = out[16 : 16 + hlen].replace(b'"format_version":1', b'"format_version":9')
        path = self.damaged("v9.lkm", out[:8] + len(text).to_bytes(8, "little") + text + out[16 + hlen :])
        r = run("eval", "--ckpt", path)
        self.assertEqual(r.returncode, 4)
        self.assertIn("version 9", r.stderr)

    def test_missing_file(self):
        r = run("eval", "--ckpt", os.path.join(WORK, "nope.lkm"))
        self.assertEqual(r.returncode, 4)

    def test_python_written_checkpoint_loads(self):
        src = os.path.join(trained("full", small()), "checkpoint.lkm")
        header, tensors = read_checkpoint.decode(read(src))
        path = self.damaged("python.lkm", read_checkpoint.encode(header, tensors))
        self.assertEqual(read(path), read(src))
        r = run("memory-inspect", "--ckpt", path, "--samples", "16")
        self.assertEqual(r.returncode, 0, r.stderr)


class MemoryInspect(unittest.TestCase):
    def test_requires_detail_memory(self):
        r = run("memory-inspect", "--ckpt", os.path.join(trained("no_edi", small(edi_on=False)), "checkpoint.lkm"))
        self.assertEqual(r.returncode, 5)
        self.assertIn("edi", r.stderr)

    def test_report(self):
        out = os.path.join(WORK, "inspect.json")
        r = run("memory-inspect", "--ckpt", os.path.join(trained("full", small()), "checkpoint.lkm"),
                "--samples", "32", "--out", out)
        self.assertEqual(r.returncode, 0, r.stderr)
        doc = json.loads(read(out, "r"))
        self.assertEqual(doc["slots"], 16)
        for bank in ("M_d", "M_ms"):
            self.assertEqual(len(doc[bank]["slot_norms"]), 16)
            self.assertAlmostEqual(sum(doc[bank]["mean_address"]), 1.0, places=6)
            self.assertEqual(sum(doc[bank]["pairwise_cosine_histogram"]["counts"]), 16 * 15 // 2)


class Probe(unittest.TestCase):
    def sweep(self, setting, out):
        r = run("probe", "--ckpt", os.path.join(trained("full", small()), "checkpoint.lkm"), "--setting", setting,
                "--pairs", "20", "--out", out)
        self.assertEqual(r.returncode, 0, r.stderr)
        return read(os.path.join(out, f"probe_{setting}.csv"), "r"), read(os.path.join(out, f"probe_{setting}.json"), "r")

    def test_tables(self):
        for setting in ("self", "cross"):
            text, doc = self.sweep(setting, os.path.join(WORK, "probe"))
            rows = list(csv.DictReader(text.splitlines()))
            self.assertEqual([r["scale"] for r in rows], ["1", "2", "3", "4", "5"])
            self.assertTrue(all(r["setting"] == setting for r in rows))
            self.assertEqual(len(json.loads(doc)["scales"]), 5)

    def test_repeatable(self):
        a = self.sweep("cross", os.path.join(WORK, "probe_a"))
        b = self.sweep("cross", os.path.join(WORK, "probe_b"))
        self.assertEqual(a, b)

    def test_unknown_setting(self):
        r = run("probe", "--ckpt", os.path.join(trained("full", small()), "checkpoint.lkm"), "--setting", "sideways")
        self.assertNotEqual(r.returncode, 0)


class GradcheckCommand(unittest.TestCase):
    def test_passes(self):
        out = os.path.join(WORK, "gradcheck.json")
        r = run("gradcheck", "--probes", "3", "--out", out)
        self.assertEqual(r.returncode, 0, r.stdout[-2000:])
        doc = json.loads(read(out, "r"))
        self.assertTrue(doc["passed"])
        names = {row["name"] for row in doc["results"]}
        for loss in ("L_dis", "L_dmem", "L_align", "L_rec", "L_adv"):
            self.assertTrue(any(loss in n for n in names), loss)

    def test_corrupted_fixture_fails_by_name(self):
        r = run("gradcheck", "--probes", "2", "--with-corrupted-fixture")
        self.assertEqual(r.returncode, 1)
        rows = {row["name"]: row for row in json.loads(r.stdout)["results"]}
        self.assertFalse(rows["corrupted_tanh_fixture"]["passed"])


class Eval(unittest.TestCase):
    def test_report(self):
        out = os.path.join(WORK, "eval.json")
        r = run("eval", "--ckpt", os.path.join(trained("full", small()), "checkpoint.lkm"), "--out", out)
        self.assertEqual(r.returncode, 0, r.stderr)
        doc = json.loads(read(out, "r"))
        for key in ("motion_leakage_r2", "rec_error_self", "rec_error_cross", "retrieval_fidelity",
                    "heldout_alignment_kl"):
            self.assertIn(key, doc)


def main():
    global CLI, WORK
    ap = argparse.ArgumentParser()
    ap.add_argument("--cli", required=True)
    ap.add_argument("--workdir", required=True)
    args, rest = ap.parse_known_args()
    CLI, WORK = os.path.abspath(args.cli), os.path.abspath(args.workdir)
    os.makedirs(WORK, exist_ok=True)
    unittest.main(argv=[sys.argv[0], "-v", *rest])


if __name__ == "__main__":
    main()
