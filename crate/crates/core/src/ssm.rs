//! Diagonal state-space primitives: zero-order-hold discretization and the
//! selective scan.
//!
//! Shapes follow the selective SSM layout: `A` is `E×H` (one diagonal of `H`
//! scalar dynamics per channel), `B` and `C` are `L×H` (one set per time step),
//! `Δ` is `L×E`, and the discretized tensors are `L×E×H`, stored row-major with
//! `h` fastest.
//!
//! Three evaluations of the recurrence live here: [`selective_scan`] (the
//! sequential reference used by the model), [`chunked_scan`] (blocked, with
//! independent chunks evaluated in parallel and the state carried across
//! block boundaries), and [`scan_oracle`] (explicit double sum, for tests).

use rayon::prelude::*;

use crate::tensor::{Result, Tensor, TensorError};

/// Below this `|δ·A|` the ZOH input factor switches to its Taylor limit.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct SsmInputs {
    /// `E×H`, continuous diagonal dynamics.
    pub a: Tensor,
    /// `L×H`, input matrix per step.
    pub b: Tensor,
    /// `L×H`, output matrix per step.
    pub c: Tensor,
    /// `L×E`, strictly positive step sizes.
    pub delta: Tensor,
}

#[derive(Debug, Clone)]
pub struct DiscretizedSsm {
    pub a_bar: Tensor,
    pub b_bar: Tensor,
}

impl DiscretizedSsm {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.a_bar.shape();
        (s[0], s[1], s[2])
    }
}

/// `(e^z - 1) / z`, the ZOH input factor, with its first-order limit near 0.
pub fn zoh_factor(z: f64) -> f64 {
    if z.abs() < ZOH_SERIES_THRESHOLD {
        1.0 + 0.5 * z
    } else {
        z.exp_m1() / z
    }
}

/// `(φ(z), φ′(z))` from a single `expm1`; `φ` is bit-identical to [`zoh_factor`].
pub(crate) fn zoh_factor_pair(z: f64) -> (f64, f64) {
    if z.abs() < ZOH_SERIES_THRESHOLD {
        return (1.0 + 0.5 * z, 0.5);
    }
    let em1 = z.exp_m1();
    let phi = em1 / z;
    let dphi = if z.abs() < 1e-2 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (1.0 + em1 - phi) / z
    };
    (phi, dphi)
}

pub(crate) fn check_inputs(a: &Tensor, delta: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (e, h) = a.dims2("discretize")?;
    let (l, e2) = delta.dims2("discretize")?;
    let (l2, h2) = b.dims2("discretize")?;
    if e != e2 || l != l2 || h != h2 {
        return Err(TensorError::ShapeMismatch {
            op: "discretize",
            lhs: vec![l, e, h],
            rhs: vec![l2, e2, h2],
        });
    }
    Ok((l, e, h))
}

/// `Â = exp(δ·A)` as an `L×E×H` buffer.
pub(crate) fn zoh_a_kernel(a: &[f64], delta: &[f64], l: usize, e: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; l * e * h];
    for t in 0..l {
        for ch in 0..e {
            let d = delta[t * e + ch];
            let base = (t * e + ch) * h;
            for s in 0..h {
                out[base + s] = (d * a[ch * h + s]).exp();
            }
        }
    }
    out
}

/// `B̂ = (δA)⁻¹(exp(δA) − 1)·δ·B` as an `L×E×H` buffer.
/// `B̂ = (δA)⁻¹(exp(δA) − 1)·δ·B` as an `L×E×H` buffer, plus `φ` and `φ′`
/// at every `(l, e, h)` for the backward pass.
pub(crate) fn zoh_b_kernel(
    a: &[f64],
    delta: &[f64],
    b: &[f64],
    l: usize,
    e: usize,
    h: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; l * e * h];
    let mut phi = vec![0.0; l * e * h];
    let mut dphi = vec![0.0; l * e * h];
    for t in 0..l {
        for ch in 0..e {
            let d = delta[t * e + ch];
            let base = (t * e + ch) * h;
            for s in 0..h {
                let (p, dp) = zoh_factor_pair(d * a[ch * h + s]);
                out[base + s] = p * d * b[t * h + s];
                phi[base + s] = p;
                dphi[base + s] = dp;
            }
        }
    }
    (out, phi, dphi)
}

/// Zero-order-hold discretization of the per-step diagonal system.
pub fn discretize(inputs: &SsmInputs) -> Result<DiscretizedSsm> {
    let (l, e, h) = check_inputs(&inputs.a, &inputs.delta, &inputs.b)?;
    if let Some(bad) = inputs.delta.data().iter().find(|d| !(**d > 0.0)) {
        return Err(TensorError::Invalid {
            op: "discretize",
            msg: format!("step size must be positive, got {bad}"),
        });
    }
    let a_bar = zoh_a_kernel(inputs.a.data(), inputs.delta.data(), l, e, h);
    let (b_bar, _, _) = zoh_b_kernel(inputs.a.data(), inputs.delta.data(), inputs.b.data(), l, e, h);
    Ok(DiscretizedSsm {
        a_bar: Tensor::new(vec![l, e, h], a_bar)?,
        b_bar: Tensor::new(vec![l, e, h], b_bar)?,
    })
}

pub(crate) fn check_scan(a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, x: &Tensor) -> Result<(usize, usize, usize)> {
    if a_bar.rank() != 3 || a_bar.shape() != b_bar.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "selective_scan",
            lhs: a_bar.shape().to_vec(),
            rhs: b_bar.shape().to_vec(),
        });
    }
    let (l, e, h) = (a_bar.shape()[0], a_bar.shape()[1], a_bar.shape()[2]);
    if c.shape() != [l, h] || x.shape() != [l, e] {
        return Err(TensorError::ShapeMismatch {
            op: "selective_scan",
            lhs: c.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    Ok((l, e, h))
}

/// Sequential recurrence from a zero state. Returns `(y, states)` where
/// `states` holds `h_l` for every step (`L×E×H`).
pub(crate) fn scan_kernel(
    a_bar: &[f64],
    b_bar: &[f64],
    c: &[f64],
    x: &[f64],
    l: usize,
    e: usize,
    h: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; l * e];
    let mut states = vec![0.0; l * e * h];
    for t in 0..l {
        let c_row = &c[t * h..(t + 1) * h];
        for ch in 0..e {
            let base = (t * e + ch) * h;
            let xv = x[t * e + ch];
            let mut acc = 0.0;
            for s in 0..h {
                let prev = if t == 0 { 0.0 } else { states[base - e * h + s] };
                let hs = a_bar[base + s] * prev + b_bar[base + s] * xv;
                states[base + s] = hs;
                acc += c_row[s] * hs;
            }
            y[t * e + ch] = acc;
        }
    }
    (y, states)
}

/// `h_l = Â_l ⊙ h_{l−1} + B̂_l·x_l`, `y_l = ⟨C_l, h_l⟩`, with `h_0 = 0`.
pub fn selective_scan(d: &DiscretizedSsm, c: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (l, e, h) = check_scan(&d.a_bar, &d.b_bar, c, x)?;
    let (y, _) = scan_kernel(d.a_bar.data(), d.b_bar.data(), c.data(), x.data(), l, e, h);
    Tensor::new(vec![l, e], y)
}

/// Hidden states `h_l` for every step, `L×E×H`.
pub fn scan_states(d: &DiscretizedSsm, c: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (l, e, h) = check_scan(&d.a_bar, &d.b_bar, c, x)?;
    let (_, states) = scan_kernel(d.a_bar.data(), d.b_bar.data(), c.data(), x.data(), l, e, h);
    Tensor::new(vec![l, e, h], states)
}

/// Upper bound on `L·E·H` accepted by [`scan_oracle`].
pub const ORACLE_MAX_SIZE: usize = 4096;

/// Closed-form unrolled sum
/// `y[l,e] = Σ_{j≤l} ⟨C_l, (∏_{k=j+1..l} Â_k) ⊙ B̂_j⟩·x[j,e]`, evaluated by
/// explicit loops. Quadratic in `L`; intended for small test instances.
pub fn scan_oracle(d: &DiscretizedSsm, c: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (l, e, h) = check_scan(&d.a_bar, &d.b_bar, c, x)?;
    if l * e * h > ORACLE_MAX_SIZE {
        return Err(TensorError::Invalid {
            op: "scan_oracle",
            msg: format!("instance too large ({} > {ORACLE_MAX_SIZE})", l * e * h),
        });
    }
    let a = d.a_bar.data();
    let b = d.b_bar.data();
    let idx = |t: usize, ch: usize, s: usize| (t * e + ch) * h + s;
    let mut y = vec![0.0; l * e];
    for t in 0..l {
        for ch in 0..e {
            let mut total = 0.0;
            for j in 0..=t {
                let mut inner = 0.0;
                for s in 0..h {
                    let mut decay = 1.0;
                    for k in j + 1..=t {
                        decay *= a[idx(k, ch, s)];
                    }
                    inner += c.at2(t, s) * decay * b[idx(j, ch, s)];
                }
                total += inner * x.at2(j, ch);
            }
            y[t * e + ch] = total;
        }
    }
    Tensor::new(vec![l, e], y)
}

/// Blocked scan. Each chunk is scanned from a zero state together with its
/// running decay product (chunks are independent and run in parallel); the
/// true state entering each chunk is then propagated across chunk ends and
/// folded back in as `h_l = P_l ⊙ carry + u_l`.
pub fn chunked_scan(d: &DiscretizedSsm, c: &Tensor, x: &Tensor, chunk: usize) -> Result<Tensor> {
    let (l, e, h) = check_scan(&d.a_bar, &d.b_bar, c, x)?;
    if chunk == 0 {
        return Err(TensorError::Invalid {
            op: "chunked_scan",
            msg: "chunk length must be at least 1".into(),
        });
    }
    let a = d.a_bar.data();
    let b = d.b_bar.data();
    let xs = x.data();
    let cs = c.data();
    let step = e * h;

    // Local pass: u (state from zero) and P (cumulative decay) per chunk.
    let locals: Vec<(Vec<f64>, Vec<f64>)> = (0..l)
        .step_by(chunk)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let end = (start + chunk).min(l);
            let mut u = vec![0.0; (end - start) * step];
            let mut p = vec![0.0; (end - start) * step];
            for t in start..end {
                let row = (t - start) * step;
                for ch in 0..e {
                    let xv = xs[t * e + ch];
                    for s in 0..h {
                        let i = ch * h + s;
                        let g = t * step + i;
                        let (u_prev, p_prev) = if t == start {
                            (0.0, 1.0)
                        } else {
                            (u[row - step + i], p[row - step + i])
                        };
                        u[row + i] = a[g] * u_prev + b[g] * xv;
                        p[row + i] = p_prev * a[g];
                    }
                }
            }
            (u, p)
        })
        .collect();

    // Carry pass across chunk boundaries.
    let mut carries = Vec::with_capacity(locals.len());
    let mut carry = vec![0.0; step];
    for (u, p) in &locals {
        carries.push(carry.clone());
        let last = u.len() - step;
        for i in 0..step {
            carry[i] = p[last + i] * carry[i] + u[last + i];
        }
    }

    let y: Vec<f64> = locals
        .par_iter()
        .zip(carries.par_iter())
        .enumerate()
        .flat_map_iter(|(ci, ((u, p), carry))| {
            let start = ci * chunk;
            let rows = u.len() / step;
            (0..rows).flat_map(move |r| {
                let t = start + r;
                (0..e).map(move |ch| {
                    let mut acc = 0.0;
                    for s in 0..h {
                        let i = ch * h + s;
                        let hs = p[r * step + i] * carry[i] + u[r * step + i];
                        acc += cs[t * h + s] * hs;
                    }
                    acc
                })
            })
        })
        .collect();
    Tensor::new(vec![l, e], y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn scalar_ssm(a_bar: f64, b_bar: f64, l: usize) -> DiscretizedSsm {
        DiscretizedSsm {
            a_bar: Tensor::full(vec![l, 1, 1], a_bar),
            b_bar: Tensor::full(vec![l, 1, 1], b_bar),
        }
    }

    #[test]
    fn discretize_half_life_example() {
        let inputs = SsmInputs {
            a: Tensor::full(vec![1, 1], -1.0),
            b: Tensor::full(vec![1, 1], 1.0),
            c: Tensor::full(vec![1, 1], 1.0),
            delta: Tensor::full(vec![1, 1], LN_2),
        };
        let d = discretize(&inputs).unwrap();
        assert!((d.a_bar.data()[0] - 0.5).abs() < 1e-15);
        assert!((d.b_bar.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn discretize_small_step_and_zero_dynamics() {
        let inputs = SsmInputs {
            a: Tensor::new(vec![1, 2], vec![-1.0, 0.0]).unwrap(),
            b: Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap(),
            c: Tensor::ones(vec![1, 2]),
            delta: Tensor::full(vec![1, 1], 1e-9),
        };
        let d = discretize(&inputs).unwrap();
        assert!((d.a_bar.data()[0] - (1.0 - 1e-9)).abs() < 1e-17);
        assert_eq!(d.a_bar.data()[1], 1.0);
        // A = 0: B̂ = δ·B exactly.
        assert!((d.b_bar.data()[1] - 3e-9).abs() < 1e-20);
    }

    #[test]
    fn discretize_rejects_nonpositive_step() {
        let inputs = SsmInputs {
            a: Tensor::full(vec![1, 1], -1.0),
            b: Tensor::ones(vec![1, 1]),
            c: Tensor::ones(vec![1, 1]),
            delta: Tensor::zeros(vec![1, 1]),
        };
        assert!(discretize(&inputs).is_err());
    }

    #[test]
    fn factor_derivative_matches_difference_quotient() {
        for &z in &[-3.0f64, -0.5, -5e-3, -2e-6, 4e-3, 0.7] {
            let h = 1e-6 * z.abs().max(1e-3);
            let fd = (zoh_factor(z + h) - zoh_factor(z - h)) / (2.0 * h);
            assert!((fd - zoh_factor_pair(z).1).abs() < 1e-6, "z={z}");
        }
    }

    #[test]
    fn scalar_recurrence_hand_unroll() {
        let d = scalar_ssm(0.5, 1.0, 3);
        let c = Tensor::ones(vec![3, 1]);
        let x = Tensor::ones(vec![3, 1]);
        let expected = [1.0, 1.5, 1.75];
        for y in [
            selective_scan(&d, &c, &x).unwrap(),
            scan_oracle(&d, &c, &x).unwrap(),
            chunked_scan(&d, &c, &x, 2).unwrap(),
        ] {
            assert_eq!(y.data(), &expected);
        }
        let zeros = selective_scan(&d, &c, &Tensor::zeros(vec![3, 1])).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_single_step_and_unit_decay() {
        let d = DiscretizedSsm {
            a_bar: Tensor::full(vec![1, 1, 2], 0.3),
            b_bar: Tensor::new(vec![1, 1, 2], vec![2.0, -1.0]).unwrap(),
        };
        let c = Tensor::new(vec![1, 2], vec![0.5, 4.0]).unwrap();
        let x = Tensor::full(vec![1, 1], 3.0);
        assert_eq!(scan_oracle(&d, &c, &x).unwrap().data(), &[(0.5 * 2.0 - 4.0) * 3.0]);

        // Â = 1: running sum of B̂·x weighted by the current C.
        let d = scalar_ssm(1.0, 1.0, 4);
        let c = Tensor::new(vec![4, 1], vec![1.0, 2.0, 0.5, 1.0]).unwrap();
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(scan_oracle(&d, &c, &x).unwrap().data(), &[1.0, 6.0, 3.0, 10.0]);
    }

    #[test]
    fn chunked_degenerate_blockings_are_exact() {
        let d = DiscretizedSsm {
            a_bar: Tensor::from_fn(vec![5, 2, 3], |i| 0.9 - 0.03 * i as f64),
            b_bar: Tensor::from_fn(vec![5, 2, 3], |i| (i as f64 * 0.7).sin()),
        };
        let c = Tensor::from_fn(vec![5, 3], |i| (i as f64).cos());
        let x = Tensor::from_fn(vec![5, 2], |i| 1.0 - 0.2 * i as f64);
        let reference = selective_scan(&d, &c, &x).unwrap();
        assert_eq!(chunked_scan(&d, &c, &x, 5).unwrap(), reference);
        assert_eq!(chunked_scan(&d, &c, &x, 1).unwrap(), reference);
        assert_eq!(chunked_scan(&d, &c, &x, 9).unwrap(), reference);
        assert!(chunked_scan(&d, &c, &x, 0).is_err());
    }

    #[test]
    fn oracle_rejects_large_instances() {
        let d = scalar_ssm(0.5, 1.0, 5000);
        let c = Tensor::ones(vec![5000, 1]);
        let x = Tensor::ones(vec![5000, 1]);
        assert!(scan_oracle(&d, &c, &x).is_err());
    }
}
