//! Positional encodings: annealed Fourier features and the multiresolution
//! hash grid, combined into the hybrid encoding by the field module.

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{InterpFootprint, InterpSpans, NodeId, Tape};
use crate::scalar::{c, Real};
use crate::tensor::Tensor;

/// Hash primes from the I-NGP reference implementation.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Truncated Hann window weight for frequency/level `k` at anneal state
/// `alpha`.
pub fn hann_weight<T: Real>(alpha: T, k: usize) -> T {
    let t = (alpha - c(k as f64)).max(T::zero()).min(T::one());
    (T::one() - (c::<T>(std::f64::consts::PI) * t).cos()) / c(2.0)
}

#[derive(Clone, Debug)]
pub struct FourierConfig<T> {
    pub num_frequencies: usize,
    /// Additive jitter on the logarithmically spaced frequencies, drawn
    /// once and persisted with the checkpoint.
    pub random_offsets: Vec<T>,
    pub anneal_alpha: T,
}

impl<T: Real> FourierConfig<T> {
    pub fn new(num_frequencies: usize, seed: u64) -> Self {
        assert!(num_frequencies >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offsets = (0..num_frequencies)
            .map(|_| c::<T>(rng.gen_range(-0.5..0.5) * std::f64::consts::PI))
            .collect();
        FourierConfig { num_frequencies, random_offsets: offsets, anneal_alpha: T::zero() }
    }

    /// Plain logarithmically spaced frequencies, no jitter. Used for the
    /// non-annealed direction encoding.
    pub fn plain(num_frequencies: usize) -> Self {
        FourierConfig {
            num_frequencies,
            random_offsets: vec![T::zero(); num_frequencies],
            anneal_alpha: c(num_frequencies as f64),
        }
    }

    pub fn set_alpha(&mut self, alpha: T) {
        self.anneal_alpha = alpha.max(T::zero()).min(c(self.num_frequencies as f64));
    }

    /// Frequency of band `k`: `2^k * pi` plus the random offset.
    pub fn frequencies(&self) -> Vec<T> {
        (0..self.num_frequencies)
            .map(|k| c::<T>((1u64 << k) as f64 * std::f64::consts::PI) + self.random_offsets[k])
            .collect()
    }

    pub fn weights(&self) -> Vec<T> {
        (0..self.num_frequencies).map(|k| hann_weight(self.anneal_alpha, k)).collect()
    }

    pub fn output_dim(&self) -> usize {
        6 * self.num_frequencies
    }

    /// Record the encoding of `[m, 3]` positions on the tape.
    pub fn encode(&self, tape: &mut Tape<T>, x: NodeId) -> NodeId {
        tape.fourier(x, self.frequencies(), self.weights())
    }

    /// Plain evaluation for one position, without a tape.
    pub fn encode_value(&self, x: &[T; 3]) -> Vec<T> {
        let freqs = self.frequencies();
        let weights = self.weights();
        let mut out = Vec::with_capacity(self.output_dim());
        for &xv in x {
            for k in 0..self.num_frequencies {
                let arg = freqs[k] * xv;
                out.push(weights[k] * arg.sin());
                out.push(weights[k] * arg.cos());
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct HashGridConfig {
    pub levels: usize,
    /// Entries per hashed level; power of two.
    pub table_size: usize,
    pub features_per_level: usize,
    pub base_resolution: usize,
    pub max_resolution: usize,
}

impl HashGridConfig {
    pub fn new(levels: usize, log2_table_size: u32, features_per_level: usize, base_resolution: usize, max_resolution: usize) -> Self {
        assert!(base_resolution >= 2);
        assert!(levels >= 1);
        HashGridConfig {
            levels,
            table_size: 1usize << log2_table_size,
            features_per_level,
            base_resolution,
            max_resolution,
        }
    }

    /// Per-level geometric growth factor b.
    pub fn growth_factor(&self) -> f64 {
        if self.levels <= 1 {
            return 2.0;
        }
        ((self.max_resolution as f64 / self.base_resolution as f64).ln() / (self.levels - 1) as f64).exp()
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        let b = self.growth_factor();
        (self.base_resolution as f64 * b.powi(level as i32) + 1e-6).floor() as usize
    }

    /// Levels whose full vertex lattice fits in the table index densely.
    pub fn is_dense(&self, level: usize) -> bool {
        let n = self.level_resolution(level) + 1;
        n * n * n <= self.table_size
    }

    pub fn level_entries(&self, level: usize) -> usize {
        if self.is_dense(level) {
            let n = self.level_resolution(level) + 1;
            n * n * n
        } else {
            self.table_size
        }
    }

    pub fn total_entries(&self) -> usize {
        (0..self.levels).map(|l| self.level_entries(l)).sum()
    }

    /// Row offset of each level inside the flattened table tensor.
    pub fn level_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.levels);
        let mut acc = 0;
        for l in 0..self.levels {
            offs.push(acc);
            acc += self.level_entries(l);
        }
        offs
    }
}

/// Table index of a voxel vertex at a given level, relative to that
/// level's block. Dense levels index row-major (x fastest), hashed levels
/// use the XOR spatial hash.
pub fn hash_index(voxel: [u32; 3], level: usize, cfg: &HashGridConfig) -> usize {
    if cfg.is_dense(level) {
        let n = cfg.level_resolution(level) as u32 + 1;
        (voxel[0] + n * (voxel[1] + n * voxel[2])) as usize
    } else {
        let h = voxel[0]
            .wrapping_mul(HASH_PRIMES[0])
            ^ voxel[1].wrapping_mul(HASH_PRIMES[1])
            ^ voxel[2].wrapping_mul(HASH_PRIMES[2]);
        (h as usize) & (cfg.table_size - 1)
    }
}

#[derive(Clone, Debug)]
pub struct HashGrid<T> {
    pub config: HashGridConfig,
    /// `[total_entries, features_per_level]`, level blocks in order.
    pub tables: Tensor<T>,
    pub anneal_alpha: T,
}

/// Out-of-domain metadata from span computation.
#[derive(Clone, Debug, Default)]
pub struct ClampReport {
    pub clamped: Vec<bool>,
    pub any_clamped: bool,
}

impl<T: Real> HashGrid<T> {
    pub fn new(config: HashGridConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = config.total_entries();
        let data = (0..total * config.features_per_level)
            .map(|_| c::<T>(rng.gen_range(-1e-4..1e-4)))
            .collect();
        let tables = Tensor::new(total, config.features_per_level, data);
        HashGrid { config, tables, anneal_alpha: T::zero() }
    }

    pub fn set_alpha(&mut self, alpha: T) {
        self.anneal_alpha = alpha.max(T::zero()).min(c(self.config.levels as f64));
    }

    pub fn output_dim(&self) -> usize {
        self.config.levels * self.config.features_per_level
    }

    /// Interpolation footprints for a batch of positions in `[0,1]^3`.
    /// Positions outside the domain are clamped and flagged.
    pub fn spans(&self, xs: &[[T; 3]]) -> (InterpSpans<T>, ClampReport) {
        let cfg = &self.config;
        let offsets = cfg.level_offsets();
        // per-level constants, hoisted out of the per-sample loop
        struct LevelInfo<T> {
            res: usize,
            resf: T,
            wl: T,
            dense_stride: u32, // res + 1 when dense, 0 when hashed
            offset: usize,
        }
        let levels: Vec<LevelInfo<T>> = (0..cfg.levels)
            .map(|l| {
                let res = cfg.level_resolution(l);
                LevelInfo {
                    res,
                    resf: c::<T>(res as f64),
                    wl: hann_weight(self.anneal_alpha, l),
                    dense_stride: if cfg.is_dense(l) { res as u32 + 1 } else { 0 },
                    offset: offsets[l],
                }
            })
            .collect();
        let table_mask = cfg.table_size - 1;
        let mut footprints = Vec::with_capacity(xs.len() * cfg.levels);
        let mut clamped = vec![false; xs.len()];
        let mut any = false;
        for (si, x) in xs.iter().enumerate() {
            let mut xc = [T::zero(); 3];
            for d in 0..3 {
                let v = x[d];
                let cl = v.max(T::zero()).min(T::one());
                if cl != v {
                    clamped[si] = true;
                    any = true;
                }
                xc[d] = cl;
            }
            for li in &levels {
                let res = li.res;
                let wl = li.wl;
                let resf = li.resf;
                let mut cell = [0u32; 3];
                let mut frac = [T::zero(); 3];
                for d in 0..3 {
                    let p = xc[d] * resf;
                    let mut ci = p.floor();
                    if ci > c(res as f64 - 1.0) {
                        ci = c(res as f64 - 1.0);
                    }
                    if ci < T::zero() {
                        ci = T::zero();
                    }
                    cell[d] = ci.to_f64_() as u32;
                    frac[d] = p - ci;
                }
                let mut fp = InterpFootprint {
                    corners: [0; 8],
                    weights: [T::zero(); 8],
                    dwdx: [[T::zero(); 3]; 8],
                };
                for ci in 0..8usize {
                    let dx = [(ci & 1) as u32, ((ci >> 1) & 1) as u32, ((ci >> 2) & 1) as u32];
                    let voxel = [cell[0] + dx[0], cell[1] + dx[1], cell[2] + dx[2]];
                    let rel = if li.dense_stride != 0 {
                        let n = li.dense_stride;
                        (voxel[0] + n * (voxel[1] + n * voxel[2])) as usize
                    } else {
                        let h = voxel[0].wrapping_mul(HASH_PRIMES[0])
                            ^ voxel[1].wrapping_mul(HASH_PRIMES[1])
                            ^ voxel[2].wrapping_mul(HASH_PRIMES[2]);
                        (h as usize) & table_mask
                    };
                    let idx = li.offset + rel;
                    fp.corners[ci] = idx as u32;
                    // weight = prod_d (dx ? frac : 1 - frac)
                    let mut w = T::one();
                    let mut wpart = [T::zero(); 3];
                    for d in 0..3 {
                        wpart[d] = if dx[d] == 1 { frac[d] } else { T::one() - frac[d] };
                        w *= wpart[d];
                    }
                    fp.weights[ci] = wl * w;
                    for d in 0..3 {
                        let sign: T = if dx[d] == 1 { T::one() } else { -T::one() };
                        let mut dw = sign * resf;
                        for d2 in 0..3 {
                            if d2 != d {
                                dw *= wpart[d2];
                            }
                        }
                        fp.dwdx[ci][d] = wl * dw;
                    }
                }
                footprints.push(fp);
            }
        }
        (
            InterpSpans { samples: xs.len(), levels: cfg.levels, feat: cfg.features_per_level, footprints },
            ClampReport { clamped, any_clamped: any },
        )
    }

    /// Record the grid encoding of `[m, 3]` positions on the tape.
    /// `tables_node` must hold this grid's tables; `x` carries the input
    /// Jacobian when supplied.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        tables_node: NodeId,
        x: Option<NodeId>,
        xs: &[[T; 3]],
    ) -> (NodeId, ClampReport) {
        let (spans, report) = self.spans(xs);
        let out = tape.gather_interp(tables_node, x, Rc::new(spans));
        (out, report)
    }

    /// Normalized weight decay: sum over levels of the mean squared table
    /// entry of that level. Coarser (smaller) levels get a higher relative
    /// penalty than a global mean would give.
    pub fn weight_decay(&self, tape: &mut Tape<T>, tables_node: NodeId) -> NodeId {
        let cfg = &self.config;
        let feat = cfg.features_per_level;
        let total = cfg.total_entries();
        let sq = tape.square(tables_node);
        let flat = tape.reshape(sq, 1, total * feat);
        let mut w = Vec::with_capacity(total * feat);
        for l in 0..cfg.levels {
            let n = cfg.level_entries(l) * feat;
            let inv = c::<T>(1.0 / n as f64);
            w.extend(std::iter::repeat(inv).take(n));
        }
        let weighted = tape.mul_row_const(flat, w);
        tape.sum_all(weighted)
    }
}
