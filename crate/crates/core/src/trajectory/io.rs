//! `traj.json` + `traj.csv` on-disk form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KinematicBounds, Trajectory};
use crate::error::{Error, Result};

pub const HEADER_FILE: &str = "traj.json";
pub const CSV_FILE: &str = "traj.csv";
const VERSION: u32 = 1;
const CSV_COLUMNS: &str = "frame,shot,index,kx,ky";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub version: u32,
    /// `[frames, shots, points, 2]`
    pub shape: [usize; 4],
    pub units: String,
    pub bounds: Option<KinematicBounds>,
    pub learnable: bool,
}

/// Writes `traj.json` and `traj.csv` into `dir`, creating it if needed.
pub fn export_trajectory(k: &Trajectory, bounds: Option<&KinematicBounds>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = TrajectoryHeader {
        version: VERSION,
        shape: k.shape(),
        units: "radians".into(),
        bounds: bounds.copied(),
        learnable: k.learnable,
    };
    fs::write(dir.join(HEADER_FILE), serde_json::to_string_pretty(&header)?)?;

    let mut csv = String::with_capacity(64 * k.coords().len() / 2 + 32);
    csv.push_str(CSV_COLUMNS);
    csv.push('\n');
    for f in 0..k.frames() {
        for s in 0..k.shots() {
            for (i, p) in k.shot(f, s).chunks_exact(2).enumerate() {
                // 17 significant digits round-trip every f64
                writeln!(csv, "{},{},{},{:.16e},{:.16e}", f, s, i, p[0], p[1]).expect("string write");
            }
        }
    }
    fs::write(dir.join(CSV_FILE), csv)?;
    Ok(())
}

/// Reads a trajectory written by [`export_trajectory`]; rows must appear in export order.
pub fn import_trajectory(dir: &Path) -> Result<(Trajectory, TrajectoryHeader)> {
    let header_path = dir.join(HEADER_FILE);
    let header: TrajectoryHeader = serde_json::from_str(&fs::read_to_string(&header_path)?)
        .map_err(|e| Error::format(&header_path, e.to_string()))?;
    if header.version != VERSION {
        return Err(Error::format(&header_path, format!("unsupported version {}", header.version)));
    }
    if header.shape[3] != 2 || header.units != "radians" {
        return Err(Error::format(&header_path, "expected [F, S, m, 2] in radians"));
    }
    let [frames, shots, points, _] = header.shape;

    let csv_path = dir.join(CSV_FILE);
    let text = fs::read_to_string(&csv_path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_COLUMNS) {
        return Err(Error::format(&csv_path, "missing or wrong column header"));
    }
    let expected = frames * shots * points;
    let mut coords = Vec::with_capacity(expected * 2);
    for (row, line) in lines.enumerate() {
        if row >= expected {
            return Err(Error::format(&csv_path, format!("more than {} rows", expected)));
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || Error::format(&csv_path, format!("malformed row {}: {:?}", row + 2, line));
        if fields.len() != 5 {
            return Err(bad());
        }
        let idx: Vec<usize> = fields[..3]
            .iter()
            .map(|s| s.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let want = [row / (shots * points), (row / points) % shots, row % points];
        if idx != want {
            return Err(bad());
        }
        for s in &fields[3..] {
            coords.push(s.parse::<f64>().map_err(|_| bad())?);
        }
    }
    if coords.len() != expected * 2 {
        return Err(Error::format(
            &csv_path,
            format!("expected {} rows, found {}", expected, coords.len() / 2),
        ));
    }
    let k = Trajectory::from_coords(frames, shots, points, coords, header.learnable)?;
    Ok((k, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{init_golden_angle, DEFAULT_SPAN};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut k = init_golden_angle(8, 3, 5, DEFAULT_SPAN).unwrap();
        k.learnable = true;
        let b = KinematicBounds { alpha: 0.3, beta: 0.01 };
        export_trajectory(&k, Some(&b), dir.path()).unwrap();
        let (back, header) = import_trajectory(dir.path()).unwrap();
        assert_eq!(header.shape[0], 8);
        assert_eq!(header.bounds, Some(b));
        for (a, b) in k.coords().iter().zip(back.coords()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back, k);
        let csv = fs::read_to_string(dir.path().join(CSV_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 1 + 8 * 3 * 5);
    }

    #[test]
    fn truncated_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let k = init_golden_angle(2, 2, 4, 1.0).unwrap();
        export_trajectory(&k, None, dir.path()).unwrap();
        let path = dir.path().join(CSV_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let cut: Vec<&str> = text.lines().take(10).collect();
        fs::write(&path, cut.join("\n")).unwrap();
        assert!(matches!(import_trajectory(dir.path()), Err(Error::Format { .. })));
    }
}
