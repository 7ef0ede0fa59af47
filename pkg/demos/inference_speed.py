"""
Inference cost
==============

One student action needs a single pass through the mixture. The diffusion
teacher needs one score evaluation per reverse-SDE step.
"""
from vdd.metrics import inference_benchmark
from vdd.moe import moe_from_gmm_target
from vdd.sde import AnalyticScore, NoiseSchedule
from vdd.tasks import StaticGMMTask

task = StaticGMMTask()
schedule = NoiseSchedule("ve", 0.01, 10.0)
# the exact mixture stands in for a trained student; the cost is the same
student = moe_from_gmm_target(task.target())
rows = inference_benchmark(student, AnalyticScore(task.target(), schedule), schedule,
                           [0.5, -0.5], nfe_list=(1, 2, 4, 8, 16, 32), repetitions=200)
base = rows[0].median_ms
print(f"{'method':<12}{'NFE':>4}{'median ms':>11}{'IQR ms':>9}{'x':>7}")
for r in rows:
    print(f"{r.method:<12}{r.nfe:>4}{r.median_ms:>11.3f}{r.iqr_ms:>9.3f}{r.median_ms / base:>7.1f}")
