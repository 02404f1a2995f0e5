"""
Calibrating the area model
==========================

Fit the three area coefficients to the whole-model rows of the published
redundancy table, then predict the rows that were held out.
"""

from cimfault.cost import (
    REFERENCE_AREA_ROWS,
    REFERENCE_MODEL,
    calibrate_area,
    estimate_area,
    estimate_energy,
    load_cost_params,
)
from cimfault.model import RedundancySpec

rows = {label: (red, area) for label, red, area in REFERENCE_AREA_ROWS}
fit = calibrate_area([rows["Vanilla"], rows["Attention x2"], rows["FFN x2"]], base=load_cost_params())
p = fit.params
print(f"base {p.area_base:.2f} mm2, attention copy {p.area_attn_copy:.2f}, ffn copy {p.area_ffn_copy:.2f}")

# %%
# Held-out rows. Layer ranges count as fractional copies of both components.
for label, (red, area) in rows.items():
    pred = estimate_area(REFERENCE_MODEL, red, p).total
    print(f"{label:>15}: predicted {pred:7.2f}, published {area:5.0f}")

# %%
# Fitting all nine rows at once shows how much the table disagrees with a
# purely linear model.
full = calibrate_area(list(rows.values()))
print("residuals:", ", ".join(f"{r:+.2f}" for r in full.residuals))

# %%
# Energy needs token counts as input; the packaged per-op figures are
# placeholders, so only ratios mean anything here.
for red in (RedundancySpec.none(), RedundancySpec.ffn(4)):
    e = estimate_energy(REFERENCE_MODEL, red, p, in_tokens=200, out_tokens=800)
    print(f"{red.label():>6}: {e.total:.4g} J  (ffn MAC share {e.breakdown['cim_ffn'] / e.total:.0%})")
