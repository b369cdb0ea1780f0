"""
Forecasting the next trip of a small fleet
==========================================

Generate a synthetic fleet, turn it into windowed samples, train the
parallel attention model and compare it with the persistence baseline.
Runs in well under a minute.
"""

from tripforecast import data, nn, train

###############################################################################
# Raw trips: one record per logged journey. GPS dropouts split some trips
# into pieces a few minutes apart; cleaning merges them and drops short hops.

trips = data.generate_synthetic(data.FleetSpec(vehicles=10, days=90), seed=0)
cleaned = data.clean_trips(sorted(trips, key=lambda t: (t.vehicle_id, t.start_time)))
print(f"{len(trips)} raw trips, {len(cleaned)} after merging and filtering")

###############################################################################
# Each sample holds the trips of the previous 8 days (oldest first, zero
# padded) and targets the next trip's time gap and distance. Splits are
# chronological per vehicle; min-max statistics come from training trips only.

ds = data.prepare_dataset(trips, window_days=8)
print(f"train/val/test: {len(ds.train)}/{len(ds.val)}/{len(ds.test)} samples, capacity L={ds.max_seq_len}")
print("normalization:", ds.stats.to_dict())

###############################################################################
# A deliberately small model keeps the demo quick.

cfg = nn.ModelConfig(variant="PM4", lstm_layer_sizes=(16, 16), attention_size=8, fc_sizes=(16, 2), max_seq_len=ds.max_seq_len)
print(f"{cfg.variant}: {nn.count_params(cfg)} parameters")

params, report = train.train_fixed_split(cfg, ds, train.TrainConfig(epochs=10, batch_size=64, patience=4))
for row in report.history:
    print(f"epoch {row['epoch']:2d}  train {row['train_error']:6.2f}%  val {row['val_error']:6.2f}%")

###############################################################################
# The prediction error is 100 * ||Y - Yhat|| / ||Y|| over both targets in
# seconds and kilometres, so the time gap dominates it.

baseline = train.persistence_error(ds.test, ds.stats)
print(f"test error: {report.prediction_error_pct:.2f}% (persistence baseline {baseline:.2f}%)")

###############################################################################
# Predictions come back in normalized units; map them to seconds and km.

feats, vlen, tgt = data.to_arrays(ds.test[:5])
pred = data.denormalize_targets(nn.predict(cfg, params, feats, vlen), ds.stats)
truth = data.denormalize_targets(tgt, ds.stats)
for (dt, km), (tdt, tkm) in zip(pred, truth):
    print(f"predicted {dt / 3600:6.1f} h, {km:5.1f} km   actual {tdt / 3600:6.1f} h, {tkm:5.1f} km")
