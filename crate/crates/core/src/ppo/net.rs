//! Gaussian policy network with a shared tanh trunk, an optional gated
//! recurrent cell, and hand-written reverse-mode gradients.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const LOG_STD_MIN: f64 = -4.0;
pub const LOG_STD_MAX: f64 = 1.0;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    /// Width of the gated recurrent cell after the trunk; 0 disables it.
    pub recurrent: usize,
    pub init_log_std: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { hidden: vec![128, 128], recurrent: 0, init_log_std: -0.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `in × out`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn zeros(i: usize, o: usize) -> Self {
        Dense { w: Array2::zeros((i, o)), b: Array1::zeros(o) }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

/// `z = σ(x·Wz + h·Uz + bz)`, `c = tanh(x·Wc + h·Uc + bc)`,
/// `h' = (1 − z)·h + z·c`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedCell {
    pub wz: Array2<f64>,
    pub uz: Array2<f64>,
    pub bz: Array1<f64>,
    pub wc: Array2<f64>,
    pub uc: Array2<f64>,
    pub bc: Array1<f64>,
}

impl GatedCell {
    fn zeros(i: usize, n: usize) -> Self {
        GatedCell {
            wz: Array2::zeros((i, n)),
            uz: Array2::zeros((n, n)),
            bz: Array1::zeros(n),
            wc: Array2::zeros((i, n)),
            uc: Array2::zeros((n, n)),
            bc: Array1::zeros(n),
        }
    }

    pub fn size(&self) -> usize {
        self.bz.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub trunk: Vec<Dense>,
    pub cell: Option<GatedCell>,
    pub mean: Dense,
    pub value: Dense,
    pub log_std: Array1<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    layer_inputs: Vec<Array2<f64>>,
    layer_outputs: Vec<Array2<f64>>,
    cell: Option<CellCache>,
    features: Array2<f64>,
    pub mean: Array2<f64>,
    pub value: Array1<f64>,
    /// Recurrent state after this step (empty without a cell).
    pub hidden: Array2<f64>,
}

#[derive(Clone, Debug)]
struct CellCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    z: Array2<f64>,
    c: Array2<f64>,
}

fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Array2<f64> {
    // Gram-Schmidt over the longer dimension gives orthonormal rows or
    // columns.
    let (n, m) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for u in &basis {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
    }
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        gain * if rows >= cols { basis[c][r] } else { basis[r][c] }
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl PolicyParams {
    /// Orthogonal initialisation: gain √2 for hidden layers, 0.01 for the
    /// action head, 1 for the value head; biases zero.
    pub fn init(obs_dim: usize, act_dim: usize, cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let mut trunk = Vec::new();
        let mut width = obs_dim;
        for &h in &cfg.hidden {
            trunk.push(Dense { w: orthogonal(width, h, std::f64::consts::SQRT_2, rng), b: Array1::zeros(h) });
            width = h;
        }
        let cell = (cfg.recurrent > 0).then(|| {
            let n = cfg.recurrent;
            let cell = GatedCell {
                wz: orthogonal(width, n, 1.0, rng),
                uz: orthogonal(n, n, 1.0, rng),
                bz: Array1::zeros(n),
                wc: orthogonal(width, n, 1.0, rng),
                uc: orthogonal(n, n, 1.0, rng),
                bc: Array1::zeros(n),
            };
            width = n;
            cell
        });
        PolicyParams {
            trunk,
            cell,
            mean: Dense { w: orthogonal(width, act_dim, 0.01, rng), b: Array1::zeros(act_dim) },
            value: Dense { w: orthogonal(width, 1, 1.0, rng), b: Array1::zeros(1) },
            log_std: Array1::from_elem(act_dim, cfg.init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        PolicyParams {
            trunk: self.trunk.iter().map(|d| Dense::zeros(d.w.nrows(), d.w.ncols())).collect(),
            cell: self.cell.as_ref().map(|c| GatedCell::zeros(c.wz.nrows(), c.size())),
            mean: Dense::zeros(self.mean.w.nrows(), self.mean.w.ncols()),
            value: Dense::zeros(self.value.w.nrows(), 1),
            log_std: Array1::zeros(self.log_std.len()),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.trunk.first().map_or(self.mean.w.nrows(), |d| d.w.nrows())
    }

    pub fn act_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn hidden_size(&self) -> usize {
        self.cell.as_ref().map_or(0, GatedCell::size)
    }

    /// Every tensor with a stable name, its shape and its values.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        fn m(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        fn v(a: &Array1<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        let mut out = Vec::new();
        for (i, d) in self.trunk.iter().enumerate() {
            out.push((format!("trunk.{i}.w"), d.w.shape().to_vec(), m(&d.w)));
            out.push((format!("trunk.{i}.b"), d.b.shape().to_vec(), v(&d.b)));
        }
        if let Some(c) = &self.cell {
            for (name, a) in [("wz", &c.wz), ("uz", &c.uz), ("wc", &c.wc), ("uc", &c.uc)] {
                out.push((format!("cell.{name}"), a.shape().to_vec(), m(a)));
            }
            for (name, a) in [("bz", &c.bz), ("bc", &c.bc)] {
                out.push((format!("cell.{name}"), a.shape().to_vec(), v(a)));
            }
        }
        out.push(("mean.w".into(), self.mean.w.shape().to_vec(), m(&self.mean.w)));
        out.push(("mean.b".into(), self.mean.b.shape().to_vec(), v(&self.mean.b)));
        out.push(("value.w".into(), self.value.w.shape().to_vec(), m(&self.value.w)));
        out.push(("value.b".into(), self.value.b.shape().to_vec(), v(&self.value.b)));
        out.push(("log_std".into(), self.log_std.shape().to_vec(), v(&self.log_std)));
        out
    }

    /// Mutable views in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for d in &mut self.trunk {
            out.push(d.w.as_slice_mut().expect("standard layout"));
            out.push(d.b.as_slice_mut().expect("standard layout"));
        }
        if let Some(c) = &mut self.cell {
            out.push(c.wz.as_slice_mut().expect("standard layout"));
            out.push(c.uz.as_slice_mut().expect("standard layout"));
            out.push(c.wc.as_slice_mut().expect("standard layout"));
            out.push(c.uc.as_slice_mut().expect("standard layout"));
            out.push(c.bz.as_slice_mut().expect("standard layout"));
            out.push(c.bc.as_slice_mut().expect("standard layout"));
        }
        out.push(self.mean.w.as_slice_mut().expect("standard layout"));
        out.push(self.mean.b.as_slice_mut().expect("standard layout"));
        out.push(self.value.w.as_slice_mut().expect("standard layout"));
        out.push(self.value.b.as_slice_mut().expect("standard layout"));
        out.push(self.log_std.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|x| x.is_finite()))
    }

    pub fn clamp_log_std(&mut self) {
        self.log_std.mapv_inplace(|x| x.clamp(LOG_STD_MIN, LOG_STD_MAX));
    }

    /// Batched forward pass. `h_prev` is the recurrent state per row and is
    /// ignored without a cell.
    pub fn forward(&self, obs: &Array2<f64>, h_prev: Option<&Array2<f64>>) -> Forward {
        let mut layer_inputs = Vec::with_capacity(self.trunk.len());
        let mut layer_outputs = Vec::with_capacity(self.trunk.len());
        let mut x = obs.clone();
        for d in &self.trunk {
            let y = d.forward(&x).mapv(f64::tanh);
            layer_inputs.push(x);
            x = y.clone();
            layer_outputs.push(y);
        }
        let (features, cell, hidden) = match &self.cell {
            Some(c) => {
                let hp = match h_prev {
                    Some(h) => h.clone(),
                    None => Array2::zeros((x.nrows(), c.size())),
                };
                let z = (x.dot(&c.wz) + hp.dot(&c.uz) + &c.bz).mapv(sigmoid);
                let cc = (x.dot(&c.wc) + hp.dot(&c.uc) + &c.bc).mapv(f64::tanh);
                let h = &hp + &(&z * &(&cc - &hp));
                (h.clone(), Some(CellCache { x, h_prev: hp, z, c: cc }), h)
            }
            None => (x, None, Array2::zeros((obs.nrows(), 0))),
        };
        let mean = self.mean.forward(&features);
        let value = self.value.forward(&features).index_axis_move(Axis(1), 0);
        Forward { layer_inputs, layer_outputs, cell, features, mean, value, hidden }
    }

    /// Backpropagates head gradients `d_mean` (B×J) and `d_value` (B) into
    /// `grad`, accumulating.
    pub fn backward(&self, fwd: &Forward, d_mean: &Array2<f64>, d_value: &Array1<f64>, grad: &mut PolicyParams) {
        let dv = d_value.view().insert_axis(Axis(1));
        grad.mean.w += &fwd.features.t().dot(d_mean);
        grad.mean.b += &d_mean.sum_axis(Axis(0));
        grad.value.w += &fwd.features.t().dot(&dv);
        grad.value.b += &dv.sum_axis(Axis(0));
        let mut dx = d_mean.dot(&self.mean.w.t()) + dv.dot(&self.value.w.t());

        if let (Some(c), Some(cache), Some(gc)) = (&self.cell, &fwd.cell, grad.cell.as_mut()) {
            let dz = &dx * &(&cache.c - &cache.h_prev);
            let dc = &dx * &cache.z;
            let da_z = &dz * &cache.z.mapv(|z| z * (1.0 - z));
            let da_c = &dc * &cache.c.mapv(|c| 1.0 - c * c);
            gc.wz += &cache.x.t().dot(&da_z);
            gc.uz += &cache.h_prev.t().dot(&da_z);
            gc.bz += &da_z.sum_axis(Axis(0));
            gc.wc += &cache.x.t().dot(&da_c);
            gc.uc += &cache.h_prev.t().dot(&da_c);
            gc.bc += &da_c.sum_axis(Axis(0));
            dx = da_z.dot(&c.wz.t()) + da_c.dot(&c.wc.t());
        }

        for (i, d) in self.trunk.iter().enumerate().rev() {
            let y = &fwd.layer_outputs[i];
            let dz = &dx * &y.mapv(|y| 1.0 - y * y);
            grad.trunk[i].w += &fwd.layer_inputs[i].t().dot(&dz);
            grad.trunk[i].b += &dz.sum_axis(Axis(0));
            if i > 0 {
                dx = dz.dot(&d.w.t());
            }
        }
    }

    /// Log-density of `actions` under the Gaussian with the given means.
    pub fn log_prob(&self, mean: &Array2<f64>, actions: &Array2<f64>) -> Array1<f64> {
        let inv_var = self.log_std.mapv(|s| (-2.0 * s).exp());
        let norm: f64 = self.log_std.iter().map(|s| s + HALF_LOG_2PI).sum();
        let diff = actions - mean;
        let quad = (&diff * &diff * &inv_var).sum_axis(Axis(1));
        quad.mapv(|q| -0.5 * q - norm)
    }

    /// Gaussian entropy `Σ (log σ + ½ log 2πe)`.
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|s| s + HALF_LOG_2PI + 0.5).sum()
    }
}
