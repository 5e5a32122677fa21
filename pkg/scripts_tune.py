"""Dev-only: dry run of the empirical acceptance criteria (not shipped)."""
import sys
import time
import numpy as np
import koopmanflow as kf
from koopmanflow.synthbench import (GenSpec, generate_dataset, to_arrays,
                                    correlation_report, trajectory_mse,
                                    velocity_stability, deployment_fields)
from koopmanflow.training import Trainer, TrainConfig, heldout_fm_loss

SEGMENTS = int(sys.argv[1]) if len(sys.argv) > 1 else 6
LR = float(sys.argv[2]) if len(sys.argv) > 2 else 2e-3
ALPHA = float(sys.argv[3]) if len(sys.argv) > 3 else 0.8
EMA = float(sys.argv[4]) if len(sys.argv) > 4 else 0.995

t_start = time.time()
spec = GenSpec(seed=0)
train = to_arrays(generate_dataset(spec, 512))
held = to_arrays(generate_dataset(GenSpec(seed=1), 128))
mcfg = kf.BackboneConfig(context_dim=spec.context_dim, seed=0, alpha=ALPHA)

def run(name, **kw):
    model = kf.KoopmanFlowModel(mcfg)
    tcfg = TrainConfig(steps=1000, seed=0, lr=LR, ema_decay=EMA, **kw)
    tr = Trainer(model, tcfg)
    fm0 = heldout_fm_loss(model, *held)
    print(f"[{name}] fm0={fm0:.4f}", flush=True)
    for seg in range(SEGMENTS):
        t0 = time.time()
        tr.fit(*train)
        m1 = trajectory_mse(model, *held, nfe=1)
        m10 = trajectory_mse(model, *held, nfe=10)
        fm = heldout_fm_loss(model, *held)
        cm, cn = correlation_report(model, *held)
        st = velocity_stability(model, *held)
        print(f"  {1000*(seg+1):5d}: fm={fm:.4f} mse1={m1:.4f} mse10={m10:.4f} "
              f"r={m1/m10:.2f} cm={cm:+.3f} cn={cn:+.3f} stab={st:.3f} "
              f"({time.time()-t0:.0f}s)", flush=True)
    print(f"  mask={model.spectral.mask.keep.astype(int)} "  # noqa
          f"run={np.round(model.spectral.running,2)}")
    f = deployment_fields(model, held[1], held[2])
    vv = np.linalg.norm(f.v_var.data, axis=-1).mean()
    vt = np.linalg.norm(f.v_total.data, axis=-1).mean()
    print(f"  c10 ratio={vv/vt:.3f}")
    return model, fm0, fm

fused, fm0, fm1 = run("fused ")
nodec, _, _ = run("nodec ", lambda_dec=0.0)
purefm, _, _ = run("purefm", ct_weight=0.0)
print(f"\nc6 ratio={fm1/fm0:.3f} | total {time.time()-t_start:.0f}s")
