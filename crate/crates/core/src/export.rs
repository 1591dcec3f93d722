//! Latent-trajectory export for external plotting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trend::{TrendError, TrendMode, TrendTrajectory};

pub const LATENT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("no trends to export")]
    Empty,
    #[error("cannot write {path}: {msg}")]
    Write { path: PathBuf, msg: String },
    #[error(transparent)]
    Trend(#[from] TrendError),
}

/// One trajectory with its labels.
pub struct LatentTrack<'a> {
    pub sequence_id: &'a str,
    pub env: &'a str,
    pub trajectory: &'a TrendTrajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentMeta {
    pub format_version: u32,
    pub trend_dim: usize,
    pub rows: usize,
    /// Sequence id to environment label.
    pub environments: BTreeMap<String, String>,
}

/// `latent.csv` gets `latent.meta.json` next to it.
pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Writes columns `sequence_id, step, t, z_1..z_d, zdot_1..zdot_d, mode`;
/// the velocity columns are empty in free mode. Returns the metadata that
/// was written beside the CSV.
pub fn export_latent(tracks: &[LatentTrack<'_>], path: &Path) -> Result<LatentMeta, ExportError> {
    let first = tracks.first().ok_or(ExportError::Empty)?;
    let d = first.trajectory.positions()?.first().map_or(0, Vec::len);
    let fail = |p: &Path, e: &dyn std::fmt::Display| ExportError::Write {
        path: p.to_path_buf(),
        msg: e.to_string(),
    };

    let mut w = csv::Writer::from_path(path).map_err(|e| fail(path, &e))?;
    let mut header = vec!["sequence_id".to_string(), "step".into(), "t".into()];
    header.extend((1..=d).map(|k| format!("z_{k}")));
    header.extend((1..=d).map(|k| format!("zdot_{k}")));
    header.push("mode".into());
    w.write_record(&header).map_err(|e| fail(path, &e))?;

    let mut rows = 0;
    let mut environments = BTreeMap::new();
    for track in tracks {
        environments.insert(track.sequence_id.to_string(), track.env.to_string());
        let traj = track.trajectory;
        let (positions, velocities): (Vec<Vec<f64>>, Option<Vec<Vec<f64>>>) = match traj.mode() {
            TrendMode::Free => (traj.positions()?, None),
            TrendMode::Cv => {
                let states = traj.states()?;
                let v = states.iter().map(|s| s.zdot.clone()).collect();
                (states.into_iter().map(|s| s.z).collect(), Some(v))
            }
        };
        for (i, (z, &t)) in positions.iter().zip(traj.times()).enumerate() {
            let mut rec = vec![track.sequence_id.to_string(), i.to_string(), t.to_string()];
            rec.extend(z.iter().map(f64::to_string));
            match &velocities {
                Some(v) => rec.extend(v[i].iter().map(f64::to_string)),
                None => rec.extend(std::iter::repeat(String::new()).take(d)),
            }
            rec.push(traj.mode().to_string());
            w.write_record(&rec).map_err(|e| fail(path, &e))?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| fail(path, &e))?;

    let meta = LatentMeta {
        format_version: LATENT_FORMAT_VERSION,
        trend_dim: d,
        rows,
        environments,
    };
    let mp = meta_path(path);
    let mut text = serde_json::to_string_pretty(&meta).expect("serializable meta");
    text.push('\n');
    fs::write(&mp, text).map_err(|e| fail(&mp, &e))?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trend::TrendState;

    #[test]
    fn free_rows_have_empty_velocity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("latent.csv");
        let free = TrendTrajectory::Free {
            times: vec![0.0, 1.0, 2.5],
            positions: vec![vec![0.1, 0.2]; 3],
        };
        let cv = TrendTrajectory::Cv {
            times: vec![0.0, 2.0],
            z0: TrendState {
                z: vec![0.0, 0.0],
                zdot: vec![1.0, 0.5],
            },
            noise: vec![vec![0.0, 0.0]],
        };
        let tracks = [
            LatentTrack {
                sequence_id: "a",
                env: "e0",
                trajectory: &free,
            },
            LatentTrack {
                sequence_id: "b",
                env: "e1",
                trajectory: &cv,
            },
        ];
        let meta = export_latent(&tracks, &path).unwrap();
        assert_eq!(meta.rows, 5);
        let mut r = csv::Reader::from_path(&path).unwrap();
        let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(header, ["sequence_id", "step", "t", "z_1", "z_2", "zdot_1", "zdot_2", "mode"]);
        let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 5);
        assert_eq!(&rows[0][5], "");
        assert_eq!(&rows[0][7], "free");
        assert_eq!(&rows[4][3], "2");
        assert_eq!(&rows[4][5], "1");
        let back: LatentMeta = serde_json::from_str(&fs::read_to_string(meta_path(&path)).unwrap()).unwrap();
        assert_eq!(back, meta);
        assert_eq!(back.environments["b"], "e1");
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let traj = TrendTrajectory::Free {
            times: vec![0.0],
            positions: vec![vec![0.0]],
        };
        let tracks = [LatentTrack {
            sequence_id: "a",
            env: "e",
            trajectory: &traj,
        }];
        let err = export_latent(&tracks, Path::new("/nonexistent/dir/latent.csv")).unwrap_err();
        assert!(matches!(err, ExportError::Write { .. }));
        assert!(matches!(export_latent(&[], Path::new("x.csv")), Err(ExportError::Empty)));
    }
}
