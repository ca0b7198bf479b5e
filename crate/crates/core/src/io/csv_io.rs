//! Long-format CSV: one row per (patient, time) with columns
//! `patient_id, t, x_0.., a_0.., y`, an optional `z` and an optional
//! trailing `observed` flag.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{LipCdeError, Result};
use crate::sim::TrajectoryRecord;

fn csv_err(path: &str, e: impl std::fmt::Display) -> LipCdeError {
    LipCdeError::Csv {
        path: path.to_string(),
        message: e.to_string(),
    }
}

fn write_rows<W: Write>(records: &[TrajectoryRecord], out: W, observed_only: bool) -> Result<()> {
    let k = records.first().map_or(0, |r| r.n_covariates());
    let j = records.first().map_or(0, |r| r.n_treatments());
    let with_z = !records.is_empty() && records.iter().all(|r| r.true_confounder.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["patient_id".to_string(), "t".to_string()];
    header.extend((0..k).map(|i| format!("x_{i}")));
    header.extend((0..j).map(|i| format!("a_{i}")));
    header.push("y".into());
    if with_z {
        header.push("z".into());
    }
    header.push("observed".into());
    w.write_record(&header).map_err(|e| csv_err("<output>", e))?;
    for r in records {
        r.validate()?;
        if r.n_covariates() != k || r.n_treatments() != j {
            return Err(LipCdeError::invalid(format!("patient {} has different widths", r.patient_id)));
        }
        for i in 0..r.len() {
            if observed_only && !r.observed_mask[i] {
                continue;
            }
            let mut row = vec![r.patient_id.clone(), r.times[i].to_string()];
            row.extend(r.covariates[i].iter().map(f64::to_string));
            row.extend(r.treatments[i].iter().map(u8::to_string));
            row.push(r.outcome[i].to_string());
            if with_z {
                row.push(r.true_confounder.as_ref().expect("checked")[i].to_string());
            }
            row.push(u8::from(r.observed_mask[i]).to_string());
            w.write_record(&row).map_err(|e| csv_err("<output>", e))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes every row of `records` with its observation flag. All records must
/// share widths; the `z` column is written only when every record carries a
/// confounder.
pub fn write_csv<W: Write>(records: &[TrajectoryRecord], out: W) -> Result<()> {
    write_rows(records, out, false)
}

/// Like [`write_csv`] but unobserved rows are left out entirely.
pub fn write_observed_csv<W: Write>(records: &[TrajectoryRecord], out: W) -> Result<()> {
    write_rows(records, out, true)
}

pub fn export_csv(records: &[TrajectoryRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf)?;
    super::manifest::write_atomic(path, &buf)
}

pub fn export_observed_csv(records: &[TrajectoryRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_observed_csv(records, &mut buf)?;
    super::manifest::write_atomic(path, &buf)
}

/// Parses long-format CSV into records, in order of first appearance.
pub fn read_csv<R: Read>(input: R, name: &str) -> Result<Vec<TrajectoryRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(name, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let bad_header = || csv_err(name, format!("unexpected header {header:?}"));
    if header.len() < 3 || header[0] != "patient_id" || header[1] != "t" {
        return Err(bad_header());
    }
    let with_obs = header.last().is_some_and(|h| h == "observed");
    let end = header.len() - usize::from(with_obs);
    let with_z = end > 2 && header[end - 1] == "z";
    let body = &header[2..end - usize::from(with_z)];
    if body.last().map(String::as_str) != Some("y") {
        return Err(bad_header());
    }
    let body = &body[..body.len() - 1];
    let k = body.iter().take_while(|h| h.starts_with("x_")).count();
    let j = body.len() - k;
    for (i, h) in body[..k].iter().enumerate() {
        if *h != format!("x_{i}") {
            return Err(bad_header());
        }
    }
    for (i, h) in body[k..].iter().enumerate() {
        if *h != format!("a_{i}") {
            return Err(bad_header());
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, TrajectoryRecord> = HashMap::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| csv_err(name, e))?;
        let at = line + 2;
        if row.len() != header.len() {
            return Err(csv_err(name, format!("line {at}: expected {} fields", header.len())));
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = row[i]
                .trim()
                .parse()
                .map_err(|_| csv_err(name, format!("line {at}: `{}` is not a number", &row[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(csv_err(name, format!("line {at}: non-finite value")))
            }
        };
        let id = row[0].to_string();
        let t = num(1)?;
        let x = (0..k).map(|i| num(2 + i)).collect::<Result<Vec<_>>>()?;
        let a = (0..j)
            .map(|i| match row[2 + k + i].trim() {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(csv_err(name, format!("line {at}: treatment `{other}` is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let y = num(2 + k + j)?;
        let z = if with_z { Some(num(3 + k + j)?) } else { None };
        let observed = if with_obs {
            match row[header.len() - 1].trim() {
                "1" => true,
                "0" => false,
                other => return Err(csv_err(name, format!("line {at}: observed flag `{other}` is not 0 or 1"))),
            }
        } else {
            true
        };

        let rec = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            TrajectoryRecord {
                patient_id: id.clone(),
                times: Vec::new(),
                covariates: Vec::new(),
                treatments: Vec::new(),
                outcome: Vec::new(),
                true_confounder: with_z.then(Vec::new),
                observed_mask: Vec::new(),
            }
        });
        if let Some(&last) = rec.times.last() {
            if t == last || rec.times.contains(&t) {
                return Err(csv_err(name, format!("line {at}: duplicate time {t} for patient {id}")));
            }
            if t < last {
                return Err(csv_err(name, format!("line {at}: times of patient {id} are not increasing")));
            }
        }
        rec.times.push(t);
        rec.covariates.push(x);
        rec.treatments.push(a);
        rec.outcome.push(y);
        if let (Some(zs), Some(z)) = (rec.true_confounder.as_mut(), z) {
            zs.push(z);
        }
        rec.observed_mask.push(observed);
    }
    Ok(order
        .into_iter()
        .map(|id| by_id.remove(&id).expect("inserted"))
        .collect())
}

pub fn ingest_csv(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let name = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let records = read_csv(file, &name)?;
    if records.iter().any(|r| r.true_confounder.is_none()) {
        log::warn!("{name}: no z column, CovSim will be skipped");
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate_factual, SimConfig};

    fn data() -> Vec<TrajectoryRecord> {
        simulate_factual(&SimConfig {
            n_patients: 6,
            seed: 11,
            ..SimConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn export_then_ingest_is_identity() {
        let d = data();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, d);
        let rows = String::from_utf8(buf).unwrap().lines().count() - 1;
        assert_eq!(rows, d.iter().map(|r| r.len()).sum::<usize>());
    }

    #[test]
    fn observed_view_drops_masked_rows() {
        let d = crate::sim::apply_missingness(&data(), 0.3, 1).unwrap();
        let mut full = Vec::new();
        write_csv(&d, &mut full).unwrap();
        assert_eq!(read_csv(full.as_slice(), "mem").unwrap(), d);
        let mut view = Vec::new();
        write_observed_csv(&d, &mut view).unwrap();
        let rows = String::from_utf8(view.clone()).unwrap().lines().count() - 1;
        let observed: usize = d.iter().map(|r| r.observed_rows().len()).sum();
        assert_eq!(rows, observed);
        assert!(rows < d.iter().map(|r| r.len()).sum::<usize>());
        let back = read_csv(view.as_slice(), "mem").unwrap();
        assert!(back.iter().all(|r| r.observed_mask.iter().all(|m| *m)));
    }

    #[test]
    fn missing_z_column_gives_absent_confounder() {
        let text = "patient_id,t,x_0,a_0,y\np1,0,0.5,1,0.1\np1,2,0.25,0,0.2\n";
        let r = read_csv(text.as_bytes(), "mem").unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].times, vec![0.0, 2.0]);
        assert!(r[0].true_confounder.is_none());
    }

    #[test]
    fn bad_rows_are_rejected() {
        let dec = "patient_id,t,x_0,a_0,y\np7,3,0,0,0\np7,1,0,0,0\n";
        let e = read_csv(dec.as_bytes(), "mem").unwrap_err().to_string();
        assert!(e.contains("p7"), "{e}");
        let dup = "patient_id,t,x_0,a_0,y\np1,1,0,0,0\np1,1,0,0,0\n";
        assert!(read_csv(dup.as_bytes(), "mem").is_err());
        let nonbin = "patient_id,t,x_0,a_0,y\np1,1,0,2,0\n";
        assert!(read_csv(nonbin.as_bytes(), "mem").is_err());
        let hdr = "id,t,x_0,a_0,y\n";
        assert!(read_csv(hdr.as_bytes(), "mem").is_err());
    }
}
