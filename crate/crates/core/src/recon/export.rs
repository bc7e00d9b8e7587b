//! Attention-map export for a spatial segment of one frame.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AttentionRecord;
use crate::error::{Error, Result};

pub const CSV_FILE: &str = "attention.csv";
pub const JSON_FILE: &str = "attention.json";

/// Square segment `[y, y+extent) x [x, x+extent)` of frame `t`, in unpadded voxels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRegion {
    pub t: usize,
    pub y: usize,
    pub x: usize,
    pub extent: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapInfo {
    pub map: usize,
    pub window_index: usize,
    /// Window origin in unpadded voxel coordinates (negative inside padding).
    pub origin: [i64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionExport {
    pub region: AttentionRegion,
    pub window: (usize, usize, usize),
    pub tokens: usize,
    /// Head index, or `None` for the mean over heads.
    pub head: Option<usize>,
    pub maps: Vec<MapInfo>,
}

/// Writes `attention.csv` (`map,row,c0..`) and `attention.json` into `dir` for every
/// window that contains frame `t` and lies inside the segment. Returns the geometry.
pub fn export_attention(
    record: &AttentionRecord,
    region: AttentionRegion,
    head: Option<usize>,
    dir: &Path,
) -> Result<AttentionExport> {
    let [t_n, h, w] = record.dims;
    if region.extent == 0 || region.t >= t_n || region.y + region.extent > h || region.x + region.extent > w {
        return Err(Error::invalid(format!(
            "region {:?} outside volume [{}, {}, {}]",
            region, t_n, h, w
        )));
    }
    if let Some(hd) = head {
        if hd >= record.heads() {
            return Err(Error::invalid(format!("head {} of {}", hd, record.heads())));
        }
    }
    let (wt, wh, ww) = record.window;
    let [gt, gh, gw] = record.grid;
    let pb = record.pad_before.map(|v| v as i64);
    let n = record.tokens();
    let mut maps = Vec::new();
    let mut csv = String::from("map,row");
    for c in 0..n {
        write!(csv, ",c{}", c).expect("string write");
    }
    csv.push('\n');

    for it in 0..gt {
        let t0 = (it * wt) as i64 - pb[0];
        if !(t0 <= region.t as i64 && (region.t as i64) < t0 + wt as i64) {
            continue;
        }
        for ih in 0..gh {
            let y0 = (ih * wh) as i64 - pb[1];
            if y0 < region.y as i64 || y0 + wh as i64 > (region.y + region.extent) as i64 {
                continue;
            }
            for iw in 0..gw {
                let x0 = (iw * ww) as i64 - pb[2];
                if x0 < region.x as i64 || x0 + ww as i64 > (region.x + region.extent) as i64 {
                    continue;
                }
                let win = (it * gh + ih) * gw + iw;
                let m = match head {
                    Some(hd) => record.map(win, hd).to_vec(),
                    None => {
                        let mut acc = vec![0.0; n * n];
                        for hd in 0..record.heads() {
                            acc.iter_mut().zip(record.map(win, hd)).for_each(|(a, v)| *a += v);
                        }
                        let inv = 1.0 / record.heads() as f64;
                        acc.iter_mut().for_each(|a| *a *= inv);
                        acc
                    }
                };
                let idx = maps.len();
                for (r, row) in m.chunks_exact(n).enumerate() {
                    write!(csv, "{},{}", idx, r).expect("string write");
                    for v in row {
                        write!(csv, ",{:.17e}", v).expect("string write");
                    }
                    csv.push('\n');
                }
                maps.push(MapInfo {
                    map: idx,
                    window_index: win,
                    origin: [t0, y0, x0],
                });
            }
        }
    }
    let export = AttentionExport {
        region,
        window: record.window,
        tokens: n,
        head,
        maps,
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CSV_FILE), csv)?;
    fs::write(dir.join(JSON_FILE), serde_json::to_string_pretty(&export)?)?;
    Ok(export)
}
