"""
Which past trips drove a forecast?
==================================

Train a small model, then attribute one test prediction to the trips in
its history window (event level) and to the three input feature groups
(feature level). Attributions plus the base score add up to the model
output exactly.
"""

import numpy as np

from tripforecast import data, explain, nn, train

trips = data.generate_synthetic(data.FleetSpec(vehicles=8, days=90), seed=1)
ds = data.prepare_dataset(trips, window_days=5)
cfg = nn.ModelConfig(variant="PM4", lstm_layer_sizes=(12, 12), attention_size=8, fc_sizes=(12, 2), max_seq_len=ds.max_seq_len)
params, report = train.train_fixed_split(cfg, ds, train.TrainConfig(epochs=6, batch_size=64, patience=3))
print(f"test error {report.prediction_error_pct:.2f}%")

###############################################################################
# Masked trips are replaced by the training-set mean row. With at most 12
# history trips every coalition is enumerated, so the values are exact.

background = explain.background_values(ds.train)
sample = max(ds.test[:40], key=lambda s: s.valid_len)
series = ds.series[sample.vehicle_id]
echo = explain.trip_echo(sample, series)

att = explain.explain_prediction(cfg, params, sample, background, level="event", output="distance")
print(f"\nvehicle {sample.vehicle_id}, {sample.valid_len} trips in the window")
print(f"base score {att.base_score:.4f} -> model score {att.model_score:.4f} (exact: {att.exact})")
for u in np.argsort(-np.abs(att.weights)):
    trip = echo[u]
    print(f"  trip {u:2d}  start {trip['start_time']:.0f}  {trip['distance_km']:6.2f} km   shap {att.weights[u]:+.5f}")
print(f"efficiency gap {att.efficiency_gap:.1e}")

###############################################################################
# Feature level: each group is masked across every trip at once.

for output in explain.OUTPUTS:
    att = explain.explain_prediction(cfg, params, sample, background, level="feature", output=output)
    parts = ", ".join(f"{u} {w:+.4f}" for u, w in zip(att.units, att.weights))
    print(f"{output:>8}: {parts}")
