"""Builds the extension module and exercises each binding once.

Run from the repository root:  python3 python/smoke_test.py
"""

import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent

SAMPLE = """Regular Condor Attributes
Universe                = vanilla
Executable              = script.sh
Arguments               = one two three
Log                     = script.log
Output                  = script.out
Error                   = script.error
should_transfer_files   = YES
when_to_transfer_output = ON_EXIT
#
# Cloud Scheduler Attributes
Requirements = 
+VMType                 = "vm-name"
+VMLoc                  = "http://repository.tld/your.vm.img.gz"
+VMAMI                  = "ami-dfasfds"
+VMCPUArch              = "x86"
+VMCPUCores             = "1"
+VMNetwork              = "private"
+VMMem                  = "512"
+VMStorage              = "20"
Queue
"""


def build_module():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "cloudsched-py"], cwd=ROOT, check=True
    )
    lib = ROOT / "target" / "release" / "libcloudsched_py.so"
    out = pathlib.Path(tempfile.mkdtemp())
    shutil.copy(lib, out / "cloudsched_py.so")
    sys.path.insert(0, str(out))


def main():
    build_module()
    import cloudsched_py as cs

    d = cs.parse_submit(SAMPLE)
    assert d["queue_count"] == 1
    assert d["vm_attrs"]["VMType"] == "vm-name"
    assert d["vm_attrs"]["VMLoc"] == "http://repository.tld/your.vm.img.gz"

    jobs = cs.jobs_from_submit(SAMPLE, "alice", 0)
    assert len(jobs) == 1
    job = jobs[0]
    assert (job["user"], job["vm_mem"], job["vm_storage"]) == ("alice", 512, 20)

    try:
        cs.parse_submit('+VMType = "a"\n+VMType = "b"\nQueue')
    except ValueError:
        pass
    else:
        raise AssertionError("duplicate key accepted")

    t = cs.fair_share_targets([("a", 30, 0), ("b", 30, 10)], 20)
    assert t == {"a": 10, "b": 10}, t

    cluster = {
        "name": "c1",
        "host": "c1.example",
        "cloud_type": "simulated",
        "memory": 2048,
        "cpu_archs": ["x86"],
        "networks": ["private"],
        "vm_slots": 1,
        "cpu_cores": 2,
        "storage": 100,
        "vms": [],
    }
    assert cs.fits(job, cluster)
    assert not cs.fits(dict(job, vm_mem=4096), cluster)

    m = cs.run_scenario(str(ROOT / "scenarios" / "babar-2000.scenario"))
    assert m["jobs_completed"] == 2000
    hours = m["makespan"] / 3_600_000
    assert 175 <= hours <= 185, hours
    print(f"smoke test ok: babar makespan {hours:.2f}h")


if __name__ == "__main__":
    main()
