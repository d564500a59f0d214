//! Optimizers over lists of parameter tensors.

use super::tensor::Tensor;

pub trait Optimizer {
    /// Applies one update in place. `grads` is aligned with `params`.
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]);
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (w, &gv)) in p.data.iter_mut().zip(&g.data).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

enum SecondMoment {
    Factored { row: Vec<f64>, col: Vec<f64> },
    Full(Vec<f64>),
}

/// AdaFactor without momentum and with a fixed learning rate.
///
/// Matrices keep factored second-moment estimates (row and column means of
/// the squared gradient); vectors keep a full estimate. The decay is
/// `1 - t^-0.8` and each update is scaled down when its RMS exceeds
/// `clip_threshold`.
pub struct AdaFactor {
    pub lr: f64,
    pub eps: f64,
    pub clip_threshold: f64,
    pub decay_rate: f64,
    t: i32,
    state: Vec<SecondMoment>,
}

impl AdaFactor {
    pub fn new(lr: f64) -> Self {
        AdaFactor {
            lr,
            eps: 1e-30,
            clip_threshold: 1.0,
            decay_rate: -0.8,
            t: 0,
            state: Vec::new(),
        }
    }
}

impl Optimizer for AdaFactor {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        if self.state.is_empty() {
            self.state = params
                .iter()
                .map(|p| {
                    if p.rows > 1 && p.cols > 1 {
                        SecondMoment::Factored {
                            row: vec![0.0; p.rows],
                            col: vec![0.0; p.cols],
                        }
                    } else {
                        SecondMoment::Full(vec![0.0; p.len()])
                    }
                })
                .collect();
        }
        self.t += 1;
        let beta2 = 1.0 - (self.t as f64).powf(self.decay_rate);
        for ((p, g), state) in params.iter_mut().zip(grads).zip(&mut self.state) {
            let sq: Vec<f64> = g.data.iter().map(|x| x * x + self.eps).collect();
            let mut update: Vec<f64> = match state {
                SecondMoment::Factored { row, col } => {
                    let (rows, cols) = (g.rows, g.cols);
                    for (r, rv) in row.iter_mut().enumerate() {
                        let mean = sq[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64;
                        *rv = beta2 * *rv + (1.0 - beta2) * mean;
                    }
                    for (c, cv) in col.iter_mut().enumerate() {
                        let mean = (0..rows).map(|r| sq[r * cols + c]).sum::<f64>() / rows as f64;
                        *cv = beta2 * *cv + (1.0 - beta2) * mean;
                    }
                    let row_mean = row.iter().sum::<f64>() / rows as f64;
                    (0..rows * cols)
                        .map(|k| {
                            let (r, c) = (k / cols, k % cols);
                            let r_factor = (row[r] / row_mean).sqrt().recip();
                            let c_factor = col[c].sqrt().recip();
                            g.data[k] * r_factor * c_factor
                        })
                        .collect()
                }
                SecondMoment::Full(v) => v
                    .iter_mut()
                    .zip(&sq)
                    .zip(&g.data)
                    .map(|((vv, s), gv)| {
                        *vv = beta2 * *vv + (1.0 - beta2) * s;
                        gv / vv.sqrt()
                    })
                    .collect(),
            };
            let rms = (update.iter().map(|u| u * u).sum::<f64>() / update.len() as f64).sqrt();
            let denom = (rms / self.clip_threshold).max(1.0);
            for (w, u) in p.data.iter_mut().zip(update.iter_mut()) {
                *w -= self.lr * *u / denom;
            }
        }
    }
}
