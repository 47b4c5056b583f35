//! CSV files shaped for external plotting.

use std::collections::BTreeSet;
use std::path::Path;

use mupar_core::io::{fmt_f64, write_csv};
use mupar_core::transfer::{summarize, Metric, SweepRecord};
use mupar_core::Result;

pub const LR_LOSS_HEADER: [&str; 4] = ["width", "log2_lr", "mean_loss", "n_seeds"];

const SCALE_FIELDS: [&str; 5] = ["width_mult", "depth", "batch_size", "seq_len", "steps"];
const RECORD_FIELDS: [&str; 5] = ["seed", "step", "train_loss", "val_loss", "diverged"];

/// Mean loss against `log2(master_lr)` per width, one row per HP point and
/// width. `base_width` turns multipliers into widths.
pub fn lr_loss_rows(
    records: &[SweepRecord],
    metric: Metric,
    base_width: usize,
) -> Vec<Vec<String>> {
    summarize(records, metric)
        .into_iter()
        .map(|s| {
            let lr = s.hp.master_lr().map_or(f64::NAN, f64::log2);
            vec![
                (s.scale.width_mult * base_width).to_string(),
                fmt_f64(lr),
                fmt_f64(s.mean),
                s.n_seeds.to_string(),
            ]
        })
        .collect()
}

pub fn write_lr_loss(
    path: &Path,
    records: &[SweepRecord],
    metric: Metric,
    base_width: usize,
) -> Result<()> {
    write_csv(
        path,
        &LR_LOSS_HEADER,
        lr_loss_rows(records, metric, base_width),
    )
}

/// Header of the sweep CSV: HP keys in sorted order, a `schedule` column if
/// any record sets one, then scale and record fields.
pub fn sweep_header(records: &[SweepRecord]) -> Vec<String> {
    let keys: BTreeSet<&String> = records.iter().flat_map(|r| r.hp.values().keys()).collect();
    let mut header: Vec<String> = keys.into_iter().cloned().collect();
    if records.iter().any(|r| r.hp.schedule().is_some()) {
        header.push("schedule".into());
    }
    header.extend(
        SCALE_FIELDS
            .iter()
            .chain(&RECORD_FIELDS)
            .map(|s| s.to_string()),
    );
    header
}

/// One row per record. `step` is the number of updates attempted before the
/// run ended.
pub fn sweep_rows(records: &[SweepRecord]) -> Vec<Vec<String>> {
    let header = sweep_header(records);
    let n_keys = header.len() - SCALE_FIELDS.len() - RECORD_FIELDS.len();
    records
        .iter()
        .map(|r| {
            let mut row: Vec<String> = header[..n_keys]
                .iter()
                .map(|k| match k.as_str() {
                    "schedule" => {
                        r.hp.schedule()
                            .map(|s| format!("{s:?}").to_lowercase())
                            .unwrap_or_default()
                    }
                    _ => r.hp.get(k).map(fmt_f64).unwrap_or_default(),
                })
                .collect();
            let s = r.scale;
            row.extend(
                [s.width_mult, s.depth, s.batch_size, s.seq_len, s.steps].map(|v| v.to_string()),
            );
            row.extend([
                r.seed.to_string(),
                r.losses.len().to_string(),
                fmt_f64(r.train_loss),
                fmt_f64(r.val_loss),
                r.diverged.to_string(),
            ]);
            row
        })
        .collect()
}

pub fn write_sweep(path: &Path, records: &[SweepRecord]) -> Result<()> {
    let header = sweep_header(records);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(path, &header, sweep_rows(records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mupar_core::transfer::{HpPoint, ScalePoint};

    fn rec(lr: f64, w: usize, seed: u64, loss: f64) -> SweepRecord {
        SweepRecord {
            hp: HpPoint::lr(lr),
            scale: ScalePoint::new(w, 1, 8, 10),
            seed,
            train_loss: loss,
            val_loss: loss,
            diverged: !loss.is_finite(),
            losses: vec![loss; 10],
        }
    }

    #[test]
    fn empty_records_give_header_only() {
        let bytes =
            mupar_core::io::csv_bytes(&LR_LOSS_HEADER, lr_loss_rows(&[], Metric::TrainLoss, 64))
                .unwrap();
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            "width,log2_lr,mean_loss,n_seeds\n"
        );
        assert_eq!(
            sweep_header(&[]).len(),
            SCALE_FIELDS.len() + RECORD_FIELDS.len()
        );
    }

    #[test]
    fn lr_loss_averages_seeds() {
        let rs = [
            rec(0.25, 2, 0, 1.0),
            rec(0.25, 2, 1, 2.0),
            rec(0.5, 2, 0, f64::INFINITY),
        ];
        let rows = lr_loss_rows(&rs, Metric::TrainLoss, 64);
        assert_eq!(rows[0], vec!["128", "-2.0", "1.5", "2"]);
        assert_eq!(rows[1], vec!["128", "-1.0", "inf", "1"]);
    }

    #[test]
    fn sweep_columns() {
        let rs = [rec(0.25, 1, 3, 1.0)];
        assert_eq!(
            sweep_header(&rs).join(","),
            "master_lr,width_mult,depth,batch_size,seq_len,steps,seed,step,train_loss,val_loss,diverged"
        );
        assert_eq!(
            sweep_rows(&rs)[0].join(","),
            "0.25,1,1,8,32,10,3,10,1.0,1.0,false"
        );
    }
}
