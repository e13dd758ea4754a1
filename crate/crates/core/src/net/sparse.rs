//! Sparse voxel hierarchy and 3x3x3 sparse convolution kernels.
//!
//! A kernel map stores, for every output voxel and each of the 27 kernel
//! offsets, the index of the contributing input voxel (or `NONE`). The same
//! table drives the forward pass and the scatter-style backward pass.

use rustc_hash::FxHashMap as HashMap;

pub(crate) const KVOL: usize = 27;
const NONE: u32 = u32::MAX;

fn offset(k: usize) -> [i32; 3] {
    [k as i32 / 9 - 1, (k as i32 / 3) % 3 - 1, k as i32 % 3 - 1]
}

#[derive(Debug, Clone)]
pub(crate) struct KernelMap {
    pub n_in: usize,
    pub n_out: usize,
    /// `n_out * KVOL` input indices.
    table: Vec<u32>,
}

impl KernelMap {
    /// Stride-1 map of a voxel set onto itself.
    fn same(coords: &[[i32; 3]], lookup: &HashMap<[i32; 3], u32>) -> Self {
        let mut table = vec![NONE; coords.len() * KVOL];
        for (o, c) in coords.iter().enumerate() {
            for k in 0..KVOL {
                let d = offset(k);
                if let Some(&i) = lookup.get(&[c[0] + d[0], c[1] + d[1], c[2] + d[2]]) {
                    table[o * KVOL + k] = i;
                }
            }
        }
        Self {
            n_in: coords.len(),
            n_out: coords.len(),
            table,
        }
    }

    /// Stride-2 map from a fine set to its parent set: output `o` reads the
    /// fine voxels at `2 * o + offset`.
    fn down(coarse: &[[i32; 3]], fine_lookup: &HashMap<[i32; 3], u32>, n_fine: usize) -> Self {
        let mut table = vec![NONE; coarse.len() * KVOL];
        for (o, c) in coarse.iter().enumerate() {
            for k in 0..KVOL {
                let d = offset(k);
                let f = [2 * c[0] + d[0], 2 * c[1] + d[1], 2 * c[2] + d[2]];
                if let Some(&i) = fine_lookup.get(&f) {
                    table[o * KVOL + k] = i;
                }
            }
        }
        Self {
            n_in: n_fine,
            n_out: coarse.len(),
            table,
        }
    }

    /// Transposed map: for each (input, offset) pair of `self` there is at
    /// most one output, so the transpose is again a per-offset table.
    fn transposed(&self) -> Self {
        let mut table = vec![NONE; self.n_in * KVOL];
        for o in 0..self.n_out {
            for k in 0..KVOL {
                let i = self.table[o * KVOL + k];
                if i != NONE {
                    debug_assert_eq!(table[i as usize * KVOL + k], NONE);
                    table[i as usize * KVOL + k] = o as u32;
                }
            }
        }
        Self {
            n_in: self.n_out,
            n_out: self.n_in,
            table,
        }
    }

    #[cfg(test)]
    pub fn pair_count(&self) -> usize {
        self.table.iter().filter(|&&i| i != NONE).count()
    }
}

/// Voxel sets at successive stride-2 resolutions plus their kernel maps.
#[derive(Debug, Clone)]
pub(crate) struct Hierarchy {
    pub coords: Vec<Vec<[i32; 3]>>,
    pub same: Vec<KernelMap>,
    /// `down[l]` maps level `l` to `l + 1`.
    pub down: Vec<KernelMap>,
    /// `up[l]` maps level `l + 1` back to `l`.
    pub up: Vec<KernelMap>,
}

impl Hierarchy {
    pub fn build(base: &[[i32; 3]], levels: usize) -> Self {
        let mut coords = vec![base.to_vec()];
        for l in 1..levels {
            let mut next: Vec<[i32; 3]> = coords[l - 1]
                .iter()
                .map(|c| [c[0].div_euclid(2), c[1].div_euclid(2), c[2].div_euclid(2)])
                .collect();
            next.sort_unstable();
            next.dedup();
            coords.push(next);
        }
        let lookups: Vec<HashMap<[i32; 3], u32>> = coords
            .iter()
            .map(|cs| cs.iter().enumerate().map(|(i, c)| (*c, i as u32)).collect())
            .collect();
        let same = coords
            .iter()
            .zip(&lookups)
            .map(|(c, lk)| KernelMap::same(c, lk))
            .collect();
        let down: Vec<KernelMap> = (0..levels.saturating_sub(1))
            .map(|l| KernelMap::down(&coords[l + 1], &lookups[l], coords[l].len()))
            .collect();
        let up = down.iter().map(KernelMap::transposed).collect();
        Self {
            coords,
            same,
            down,
            up,
        }
    }
}

/// `y[o] = b + sum_k W_k^T x[table[o, k]]` with `W` laid out `[k][cin][cout]`.
pub(crate) fn conv_forward(
    map: &KernelMap,
    x: &[f64],
    cin: usize,
    w: &[f64],
    b: &[f64],
    cout: usize,
) -> Vec<f64> {
    debug_assert_eq!(x.len(), map.n_in * cin);
    let mut y = vec![0.0; map.n_out * cout];
    for (o, yrow) in y.chunks_exact_mut(cout).enumerate() {
        yrow.copy_from_slice(b);
        for k in 0..KVOL {
            let i = map.table[o * KVOL + k];
            if i == NONE {
                continue;
            }
            let xrow = &x[i as usize * cin..(i as usize + 1) * cin];
            let wk = &w[k * cin * cout..(k + 1) * cin * cout];
            for (c, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wk[c * cout..(c + 1) * cout];
                for (yv, &wv) in yrow.iter_mut().zip(wrow) {
                    *yv += xv * wv;
                }
            }
        }
    }
    y
}

/// Accumulates weight, bias and (optionally) input gradients of
/// [`conv_forward`] given the output gradient `gy`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    map: &KernelMap,
    x: &[f64],
    cin: usize,
    w: &[f64],
    cout: usize,
    gy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    mut gx: Option<&mut [f64]>,
) {
    for (o, gyrow) in gy.chunks_exact(cout).enumerate() {
        if gyrow.iter().all(|&g| g == 0.0) {
            continue;
        }
        for (acc, &g) in gb.iter_mut().zip(gyrow) {
            *acc += g;
        }
        for k in 0..KVOL {
            let i = map.table[o * KVOL + k];
            if i == NONE {
                continue;
            }
            let i = i as usize;
            let xrow = &x[i * cin..(i + 1) * cin];
            let base = k * cin * cout;
            for (c, &xv) in xrow.iter().enumerate() {
                let r = base + c * cout..base + (c + 1) * cout;
                if xv != 0.0 {
                    for (acc, &g) in gw[r.clone()].iter_mut().zip(gyrow) {
                        *acc += xv * g;
                    }
                }
                if let Some(gx) = gx.as_deref_mut() {
                    let dot: f64 = w[r].iter().zip(gyrow).map(|(a, b)| a * b).sum();
                    gx[i * cin + c] += dot;
                }
            }
        }
    }
}
