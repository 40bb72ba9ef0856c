"""
Synthetic multicoil data and the two measurement models
=======================================================

Builds one phantom case in memory, inspects its pieces, and sanity-checks the
sensitivity-weighted (sn) and coilwise (pcn) operators: forward/adjoint
consistency and the quality of the plain zero-filled reconstruction.

Writes preview images to demos/out/.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from unrollmri.data import PhantomSpec, gen_case
from unrollmri.metrics import evaluate_metrics
from unrollmri.operators import CoilwiseOp, SenseOp, zero_filled

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)


def save_png(name: str, mag: np.ndarray) -> None:
    arr = np.clip(mag / mag.max(), 0.0, 1.0)
    Image.fromarray(np.round(255 * arr).astype(np.uint8), "L").save(OUT / name)


# ---------------------------------------------------------------------------
# 1. one case: 4 slices, 4 coils, accelerations 4 and 8

spec = PhantomSpec(height=64, width=64, sigma=0.01, seed=3)
case = gen_case(spec, case_index=0, n_slices=4, q=4, r_list=[4, 8])

print("case id       :", case.case_id)
print("kspace        :", case.kspace.shape, case.kspace.dtype)
for acl, maps in case.smaps.items():
    print(f"maps acl={acl:3d}  :", maps.shape)
for r, mask in case.masks.items():
    lines = int(mask.pe_mask.sum())
    print(f"mask R={r}      : {lines}/{mask.n_pe} lines, {mask.acl_count} central")

# ---------------------------------------------------------------------------
# 2. the sn operator maps a coil-combined image to masked multicoil k-space

from unrollmri.operators import SensitivityMaps

r = 4
mask = case.masks[r]
acl = mask.acl_count
smaps = SensitivityMaps(case.smaps[acl][0])
y = case.kspace[0] * mask.pe_mask

sn = SenseOp(smaps, mask)
pcn = CoilwiseOp(case.kspace.shape[1], mask)

# adjointness: <A x, y> must equal <x, A^H y> for both models
rng = np.random.default_rng(0)
for name, op, dom in [("sn", sn, (smaps.sets, 64, 64)), ("pcn", pcn, (4, 64, 64))]:
    x = rng.standard_normal(dom) + 1j * rng.standard_normal(dom)
    v = rng.standard_normal((4, 64, 64)) + 1j * rng.standard_normal((4, 64, 64))
    lhs = np.vdot(op.forward(x), v)
    rhs = np.vdot(x, op.adjoint(v))
    print(f"{name} adjointness gap: {abs(lhs - rhs):.3e}")

# ---------------------------------------------------------------------------
# 3. zero-filled baselines at both accelerations

reference = np.sqrt(np.sum(np.abs(case.reference[acl][0]) ** 2, axis=0))
save_png("01_reference.png", reference)

for r in (4, 8):
    mask = case.masks[r]
    smaps = SensitivityMaps(case.smaps[mask.acl_count][0])
    y = case.kspace[0] * mask.pe_mask
    zf = np.sqrt(np.sum(np.abs(zero_filled(y, mask, smaps)) ** 2, axis=0))
    entry = evaluate_metrics(zf, reference, m=case.foreground[0])
    print(f"R={r} zero-filled: nmse {entry['nmse']:.4f} ssim {entry['ssim']:.4f} "
          f"(foreground ssim {entry['ssim_fg']:.4f})")
    save_png(f"01_zero_filled_r{r}.png", zf)

print("previews written to", OUT)
