//! Permutohedral lattice for high-dimensional Gaussian filtering.
//!
//! Points are lifted onto the `d`-dimensional permutohedral lattice embedded
//! in the hyperplane `sum(x) = 0` of `R^(d+1)`. Filtering is splat
//! (barycentric scatter onto the `d + 1` enclosing simplex vertices), a
//! `[1 2 1]` blur along each of the `d + 1` lattice directions, and slice
//! (barycentric gather). The result approximates
//! `out_i = sum_j exp(-|f_i - f_j|^2 / 2) * in_j` for features `f` already
//! divided by their bandwidths. The approximation error is a few percent;
//! callers that need exact sums use the direct path.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::par::{self, Exec};

/// Largest supported feature dimension.
pub const MAX_DIM: usize = 8;

type Key = [i32; MAX_DIM];

#[derive(Debug, Clone)]
pub struct Lattice {
    dim: usize,
    num_points: usize,
    num_vertices: usize,
    /// Vertex index per (point, simplex corner).
    offsets: Vec<u32>,
    barycentric: Vec<f64>,
    /// Per (direction, vertex): neighbour vertex indices, `u32::MAX` if absent.
    neighbours: Vec<[u32; 2]>,
}

struct Embedded {
    keys: [Key; MAX_DIM + 1],
    weights: [f64; MAX_DIM + 1],
}

impl Lattice {
    /// Builds the lattice for `features.len() / dim` points with `dim`
    /// coordinates each (already scaled by the inverse bandwidth).
    pub fn new(features: &[f64], dim: usize, exec: Exec) -> Self {
        assert!(dim >= 1 && dim <= MAX_DIM, "feature dimension {dim} unsupported");
        assert_eq!(features.len() % dim, 0);
        let n = features.len() / dim;
        let d = dim;

        // Diagonal of the elevation matrix, with the extra factor that makes
        // the [1 2 1] blur match a unit-variance Gaussian.
        let inv_std = (2.0f64 / 3.0).sqrt() * (d + 1) as f64;
        let scale: Vec<f64> = (0..d)
            .map(|i| inv_std / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();

        let embedded: Vec<Embedded> =
            par::map_range(exec, n, |k| embed(&features[k * d..(k + 1) * d], &scale));

        let mut table: HashMap<Key, u32> = HashMap::with_capacity(n * (d + 1));
        let mut keys: Vec<Key> = Vec::new();
        let mut offsets = Vec::with_capacity(n * (d + 1));
        let mut barycentric = Vec::with_capacity(n * (d + 1));
        for e in &embedded {
            for r in 0..=d {
                let next = keys.len() as u32;
                let idx = *table.entry(e.keys[r]).or_insert_with(|| {
                    keys.push(e.keys[r]);
                    next
                });
                offsets.push(idx);
                barycentric.push(e.weights[r]);
            }
        }
        let m = keys.len();

        let mut neighbours = vec![[u32::MAX; 2]; (d + 1) * m];
        par::for_each_chunk_mut(exec, &mut neighbours, m.max(1), |dir, chunk| {
            for (j, slot) in chunk.iter_mut().enumerate() {
                let key = &keys[j];
                let mut n1 = [0i32; MAX_DIM];
                let mut n2 = [0i32; MAX_DIM];
                for k in 0..d {
                    n1[k] = key[k] - 1;
                    n2[k] = key[k] + 1;
                }
                if dir < d {
                    n1[dir] = key[dir] + d as i32;
                    n2[dir] = key[dir] - d as i32;
                }
                *slot = [
                    table.get(&n1).copied().unwrap_or(u32::MAX),
                    table.get(&n2).copied().unwrap_or(u32::MAX),
                ];
            }
        });

        Lattice {
            dim: d,
            num_points: n,
            num_vertices: m,
            offsets,
            barycentric,
            neighbours,
        }
    }

    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    /// Filters `values` (`num_points x channels`, point-major).
    pub fn filter(&self, values: &[f64], channels: usize, exec: Exec) -> Vec<f64> {
        assert_eq!(values.len(), self.num_points * channels);
        let d = self.dim;
        let m = self.num_vertices;
        let vs = channels;

        let mut lattice = vec![0f64; m * vs];
        for (p, input) in values.chunks_exact(vs).enumerate() {
            for r in 0..=d {
                let o = self.offsets[p * (d + 1) + r] as usize * vs;
                let w = self.barycentric[p * (d + 1) + r];
                for c in 0..vs {
                    lattice[o + c] += w * input[c];
                }
            }
        }

        let mut scratch = vec![0f64; m * vs];
        for dir in 0..=d {
            let src = &lattice;
            let nbrs = &self.neighbours[dir * m..(dir + 1) * m];
            par::for_each_chunk_mut(exec, &mut scratch, vs, |j, out| {
                let [a, b] = nbrs[j];
                let own = &src[j * vs..(j + 1) * vs];
                for c in 0..vs {
                    let mut acc = 0.0;
                    if a != u32::MAX {
                        acc += src[a as usize * vs + c];
                    }
                    if b != u32::MAX {
                        acc += src[b as usize * vs + c];
                    }
                    out[c] = own[c] + 0.5 * acc;
                }
            });
            std::mem::swap(&mut lattice, &mut scratch);
        }

        // Normalisation of the blurred splat so a unit impulse keeps unit
        // mass at its own location in the continuous limit.
        let alpha = 1.0 / (1.0 + 2f64.powi(-(d as i32)));
        let mut out = vec![0f64; self.num_points * vs];
        par::for_each_chunk_mut(exec, &mut out, vs, |p, dst| {
            for r in 0..=d {
                let o = self.offsets[p * (d + 1) + r] as usize * vs;
                let w = self.barycentric[p * (d + 1) + r] * alpha;
                for c in 0..vs {
                    dst[c] += w * lattice[o + c];
                }
            }
        });
        out
    }
}

/// Mean response of the lattice to an isolated unit impulse, read back at
/// the impulse itself, averaged over a fixed low-discrepancy set of
/// positions. The raw lattice under-reports the Gaussian sum by roughly this
/// factor (0.78 for `d = 1` down to 0.46 for `d = 5`); the response at a
/// single point varies with its position inside the simplex.
pub fn mean_self_gain(dim: usize) -> f64 {
    static GAINS: OnceLock<Vec<f64>> = OnceLock::new();
    let gains = GAINS.get_or_init(|| {
        (1..=MAX_DIM)
            .map(|d| {
                const SAMPLES: usize = 512;
                let total: f64 = (0..SAMPLES)
                    .map(|k| {
                        // Kronecker sequence with irrational steps per axis
                        let f: Vec<f64> = (0..d)
                            .map(|i| {
                                let step = (((i + 2) as f64).sqrt()).fract();
                                ((k as f64 + 0.5) * step).fract() * 4.0
                            })
                            .collect();
                        Lattice::new(&f, d, Exec::Sequential).filter(&[1.0], 1, Exec::Sequential)[0]
                    })
                    .sum();
                total / SAMPLES as f64
            })
            .collect()
    });
    gains[dim - 1]
}

/// Elevates one feature vector and finds its enclosing simplex.
fn embed(f: &[f64], scale: &[f64]) -> Embedded {
    let d = f.len();
    let dp1 = (d + 1) as i32;

    let mut elevated = [0f64; MAX_DIM + 1];
    let mut sm = 0.0;
    for j in (1..=d).rev() {
        let cf = f[j - 1] * scale[j - 1];
        elevated[j] = sm - j as f64 * cf;
        sm += cf;
    }
    elevated[0] = sm;

    // Closest remainder-0 point.
    let down = 1.0 / (d + 1) as f64;
    let mut rem0 = [0i32; MAX_DIM + 1];
    let mut sum = 0i32;
    for i in 0..=d {
        let rd = (down * elevated[i]).round() as i32;
        rem0[i] = rd * dp1;
        sum += rd;
    }

    // Rank of each coordinate of the differential in descending order.
    let mut rank = [0i32; MAX_DIM + 1];
    for i in 0..d {
        let di = elevated[i] - rem0[i] as f64;
        for j in i + 1..=d {
            if di < elevated[j] - rem0[j] as f64 {
                rank[i] += 1;
            } else {
                rank[j] += 1;
            }
        }
    }

    // Project back onto the hyperplane if the rounding left it.
    for i in 0..=d {
        rank[i] += sum;
        if rank[i] < 0 {
            rank[i] += dp1;
            rem0[i] += dp1;
        } else if rank[i] > d as i32 {
            rank[i] -= dp1;
            rem0[i] -= dp1;
        }
    }

    let mut bary = [0f64; MAX_DIM + 2];
    for i in 0..=d {
        let v = (elevated[i] - rem0[i] as f64) * down;
        let r = rank[i] as usize;
        bary[d - r] += v;
        bary[d - r + 1] -= v;
    }
    bary[0] += 1.0 + bary[d + 1];

    let mut keys = [[0i32; MAX_DIM]; MAX_DIM + 1];
    let mut weights = [0f64; MAX_DIM + 1];
    for remainder in 0..=d {
        for i in 0..d {
            let r = rank[i] as usize;
            // Canonical simplex vertex `remainder`, coordinate of rank r.
            let canonical = if r <= d - remainder {
                remainder as i32
            } else {
                remainder as i32 - dp1
            };
            keys[remainder][i] = rem0[i] + canonical;
        }
        weights[remainder] = bary[remainder];
    }
    Embedded { keys, weights }
}
