//! Non-overlapping 3D window tiling of `[C, T, H, W]` feature volumes.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Window extents `(wt, wh, ww)`.
pub type Window = (usize, usize, usize);

pub(crate) fn window_counts(dims: [usize; 3], window: Window) -> Result<[usize; 3]> {
    let w = [window.0, window.1, window.2];
    if w.iter().any(|&v| v == 0) {
        return Err(Error::invalid(format!("window {:?} has a zero extent", window)));
    }
    if dims.iter().zip(&w).any(|(d, w)| d % w != 0) {
        return Err(Error::shape(format!(
            "dims {:?} are not divisible by window {:?}",
            dims, window
        )));
    }
    Ok([dims[0] / w[0], dims[1] / w[1], dims[2] / w[2]])
}

/// `[C, T, H, W] -> [n_windows, tokens, C]`, windows ordered (t, h, w) and tokens likewise.
pub(crate) fn partition_graph(g: &mut Graph, x: Var, window: Window) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("window partition expects [C,T,H,W], got {:?}", s)));
    }
    let [nt, nh, nw] = window_counts([s[1], s[2], s[3]], window)?;
    let (wt, wh, ww) = window;
    let x = g.reshape(x, &[s[0], nt, wt, nh, wh, nw, ww])?;
    let x = g.permute(x, &[1, 3, 5, 2, 4, 6, 0])?;
    g.reshape(x, &[nt * nh * nw, wt * wh * ww, s[0]])
}

/// Inverse of [`partition_graph`].
pub(crate) fn unpartition_graph(g: &mut Graph, x: Var, dims: [usize; 3], window: Window) -> Result<Var> {
    let [nt, nh, nw] = window_counts(dims, window)?;
    let (wt, wh, ww) = window;
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[0] != nt * nh * nw || s[1] != wt * wh * ww {
        return Err(Error::shape(format!(
            "tokens {:?} do not tile {:?} with window {:?}",
            s, dims, window
        )));
    }
    let c = s[2];
    let x = g.reshape(x, &[nt, nh, nw, wt, wh, ww, c])?;
    let x = g.permute(x, &[6, 0, 3, 1, 4, 2, 5])?;
    g.reshape(x, &[c, dims[0], dims[1], dims[2]])
}

pub fn window_partition(x: &Tensor, window: Window) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone())?;
    let out = partition_graph(&mut g, v, window)?;
    Ok(g.value(out).clone())
}

/// Restores `[C, T, H, W]` from `[n_windows, tokens, C]`.
pub fn window_unpartition(tokens: &Tensor, dims: [usize; 3], window: Window) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(tokens.clone())?;
    let out = unpartition_graph(&mut g, v, dims, window)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_round_trip() {
        let x = Tensor::from_fn(&[3, 4, 8, 8], |i| i as f64 * 0.5 - 7.0);
        let p = window_partition(&x, (2, 4, 4)).unwrap();
        assert_eq!(p.shape(), &[8, 32, 3]);
        let back = window_unpartition(&p, [4, 8, 8], (2, 4, 4)).unwrap();
        assert_eq!(back, x);

        let whole = window_partition(&x, (4, 8, 8)).unwrap();
        assert_eq!(whole.shape(), &[1, 256, 3]);
        assert!(window_partition(&x, (3, 4, 4)).is_err());
    }

    #[test]
    fn token_layout() {
        // one channel, value = linear voxel index
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64);
        let p = window_partition(&x, (1, 2, 2)).unwrap();
        // window 1 = (t 0, h 0, w 1): voxels (0,0,2),(0,0,3),(0,1,2),(0,1,3)
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        // last window = (t 1, h 1, w 1)
        assert_eq!(&p.data()[28..32], &[26.0, 27.0, 30.0, 31.0]);
    }
}
