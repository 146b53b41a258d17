use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{feature_names, CohortSpec, Dataset, PatientRecord, ShiftSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: CohortSpec,
    pub shift: Option<ShiftSpec>,
    pub feature_names: Vec<String>,
    pub patients: usize,
    pub visits: usize,
    pub features: usize,
    pub prevalence: f64,
    pub bias: f64,
    pub readmission_bias: f64,
}

/// 17 significant digits: enough to round-trip any `f64`.
fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.16e}")
    }
}

fn parse(s: &str, what: &str) -> Result<f64> {
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    s.parse()
        .map_err(|_| Error::Data(format!("bad number '{s}' in {what}")))
}

pub fn write_dataset(dir: &Path, d: &Dataset) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let spec = &d.spec;
    let names = feature_names(spec);
    let manifest = DatasetManifest {
        spec: spec.clone(),
        shift: d.shift.clone(),
        feature_names: names.clone(),
        patients: d.len(),
        visits: spec.visits,
        features: spec.features(),
        prevalence: d.prevalence(),
        bias: d.bias,
        readmission_bias: d.readmission_bias,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;

    let fd = spec.dynamic_features;
    let mut w = csv::Writer::from_path(dir.join("visits.csv"))?;
    let mut header = vec!["patient_id".to_string(), "visit_index".to_string()];
    header.extend(names[..fd].iter().cloned());
    w.write_record(&header)?;
    for p in &d.patients {
        for (t, row) in p.x.rows().into_iter().enumerate() {
            let mut rec = vec![p.id.to_string(), t.to_string()];
            rec.extend(row.iter().take(fd).map(|&v| fmt(v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("patients.csv"))?;
    let mut header = vec!["patient_id".to_string()];
    header.extend(names[fd..].iter().cloned());
    header.extend(["label", "readmission", "subgroup"].map(String::from));
    w.write_record(&header)?;
    for p in &d.patients {
        let mut rec = vec![p.id.to_string()];
        rec.extend(p.statics.iter().map(|&v| fmt(v)));
        rec.extend([p.label.to_string(), p.readmission.to_string(), p.subgroup.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let spec = manifest.spec.clone();
    let (t, fd, fs_) = (spec.visits, spec.dynamic_features, spec.static_features);
    let f = fd + fs_;

    let mut patients = Vec::with_capacity(manifest.patients);
    let mut r = csv::Reader::from_path(dir.join("patients.csv"))?;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 1 + fs_ + 3 {
            return Err(Error::Data(format!("patients.csv row has {} fields", rec.len())));
        }
        let int = |i: usize| -> Result<usize> {
            rec[i]
                .parse()
                .map_err(|_| Error::Data(format!("bad integer '{}' in patients.csv", &rec[i])))
        };
        let statics = (0..fs_)
            .map(|j| parse(&rec[1 + j], "patients.csv"))
            .collect::<Result<Vec<_>>>()?;
        let label = int(1 + fs_)?;
        let readmission = int(2 + fs_)?;
        if label > 1 || readmission > 1 {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        let mut x = Array2::from_elem((t, f), f64::NAN);
        for step in 0..t {
            for (j, &v) in statics.iter().enumerate() {
                x[[step, fd + j]] = v;
            }
        }
        patients.push(PatientRecord {
            id: int(0)?,
            x,
            statics,
            label: label as u8,
            readmission: readmission as u8,
            subgroup: int(3 + fs_)?,
        });
    }
    let index: std::collections::HashMap<usize, usize> =
        patients.iter().enumerate().map(|(i, p)| (p.id, i)).collect();

    let mut r = csv::Reader::from_path(dir.join("visits.csv"))?;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 2 + fd {
            return Err(Error::Data(format!("visits.csv row has {} fields", rec.len())));
        }
        let id: usize = rec[0].parse().map_err(|_| Error::Data("bad patient id in visits.csv".into()))?;
        let step: usize = rec[1].parse().map_err(|_| Error::Data("bad visit index in visits.csv".into()))?;
        let &i = index
            .get(&id)
            .ok_or_else(|| Error::Data(format!("visit for unknown patient {id}")))?;
        if step >= t {
            return Err(Error::Data(format!("visit index {step} out of range")));
        }
        for j in 0..fd {
            patients[i].x[[step, j]] = parse(&rec[2 + j], "visits.csv")?;
        }
    }
    Ok(Dataset {
        spec,
        shift: manifest.shift,
        patients,
        bias: manifest.bias,
        readmission_bias: manifest.readmission_bias,
    })
}
