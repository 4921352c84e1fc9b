//! Reference WKV evaluations on plain tensors.
//!
//! Both functions return the full per-step `wkv_t` matrices `(h, T, d, d)`.
//! [`wkv_direct`] is the literal quadratic-time sum and serves as the oracle
//! for [`wkv_recurrent`] and for the fused gated kernel used in training.

use crate::autodiff::{kernels::sigmoid, Tensor};
use crate::error::{dim_err, Error, Result};

struct Geometry {
    heads: usize,
    steps: usize,
    dim: usize,
}

fn check(k: &Tensor, v: &Tensor, w: &Tensor, u: &Tensor) -> Result<Geometry> {
    let ks = k.shape();
    if ks.len() != 3 || v.shape() != ks {
        return dim_err(format!("keys/values must be (h, T, d), got {ks:?} / {:?}", v.shape()));
    }
    let expect = [ks[0], ks[2]];
    if w.shape() != expect || u.shape() != expect {
        return dim_err(format!(
            "decay {:?} and bonus {:?} must be {expect:?}",
            w.shape(),
            u.shape()
        ));
    }
    if let Some(bad) = w.data().iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        return Err(Error::Contract(format!("decay {bad} outside (0, 1)")));
    }
    Ok(Geometry {
        heads: ks[0],
        steps: ks[1],
        dim: ks[2],
    })
}

/// `wkv_t = diag(u)·k_tᵀ·v_t + Σ_{i<t} diag(w)^{t−1−i}·k_iᵀ·v_i`, summed
/// term by term.
pub fn wkv_direct(k: &Tensor, v: &Tensor, w: &Tensor, u: &Tensor) -> Result<Tensor> {
    let Geometry { heads, steps, dim } = check(k, v, w, u)?;
    let mut out = Tensor::zeros(&[heads, steps, dim, dim]);
    for h in 0..heads {
        for t in 0..steps {
            for a in 0..dim {
                let wa = w.at(&[h, a]);
                for b in 0..dim {
                    let mut acc = u.at(&[h, a]) * k.at(&[h, t, a]) * v.at(&[h, t, b]);
                    for i in 0..t {
                        let decay = wa.powi((t - 1 - i) as i32);
                        acc += decay * k.at(&[h, i, a]) * v.at(&[h, i, b]);
                    }
                    out.set(&[h, t, a, b], acc);
                }
            }
        }
    }
    Ok(out)
}

/// Same quantity through the state recurrence `A_1 = 0`,
/// `wkv_t = diag(u)·k_tᵀ·v_t + A_t`, `A_{t+1} = diag(w)·A_t + k_tᵀ·v_t`.
pub fn wkv_recurrent(k: &Tensor, v: &Tensor, w: &Tensor, u: &Tensor) -> Result<Tensor> {
    let Geometry { heads, steps, dim } = check(k, v, w, u)?;
    let mut out = vec![0.0; heads * steps * dim * dim];
    let mut state = vec![0.0; dim * dim];
    for h in 0..heads {
        state.fill(0.0);
        let wh = &w.data()[h * dim..(h + 1) * dim];
        let uh = &u.data()[h * dim..(h + 1) * dim];
        for t in 0..steps {
            let off = (h * steps + t) * dim;
            let kt = &k.data()[off..off + dim];
            let vt = &v.data()[off..off + dim];
            let dst = &mut out[off * dim..(off + dim) * dim];
            for a in 0..dim {
                for b in 0..dim {
                    let kv = kt[a] * vt[b];
                    dst[a * dim + b] = uh[a] * kv + state[a * dim + b];
                    state[a * dim + b] = wh[a] * state[a * dim + b] + kv;
                }
            }
        }
    }
    Tensor::new(vec![heads, steps, dim, dim], out)
}

/// Output gating and head merge: per head `o_t = σ(r_t)·wkv_t` (row vector
/// times matrix), heads concatenated, then projected by `w_o`.
///
/// `r`: `(T, C)`; `wkv`: `(h, T, d, d)` with `C = h·d`; `w_o`: `(C, C)`.
pub fn multihead_gate(r: &Tensor, wkv: &Tensor, w_o: &Tensor) -> Result<Tensor> {
    let ws = wkv.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return dim_err(format!("wkv must be (h, T, d, d), got {ws:?}"));
    }
    let (heads, steps, dim) = (ws[0], ws[1], ws[2]);
    let c = heads * dim;
    if r.shape() != [steps, c] || w_o.shape() != [c, c] {
        return dim_err(format!(
            "receptance {:?} / output projection {:?} inconsistent with {heads} heads of {dim}",
            r.shape(),
            w_o.shape()
        ));
    }
    let mut merged = Tensor::zeros(&[steps, c]);
    for h in 0..heads {
        for t in 0..steps {
            for b in 0..dim {
                let mut acc = 0.0;
                for a in 0..dim {
                    acc += sigmoid(r.at(&[t, h * dim + a])) * wkv.at(&[h, t, a, b]);
                }
                merged.set(&[t, h * dim + b], acc);
            }
        }
    }
    let mut out = Tensor::zeros(&[steps, c]);
    for t in 0..steps {
        for j in 0..c {
            let acc = (0..c).map(|i| merged.at(&[t, i]) * w_o.at(&[i, j])).sum();
            out.set(&[t, j], acc);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn first_step_is_bonus_only() {
        let k = t(&[1, 1, 2], &[1.0, 2.0]);
        let v = t(&[1, 1, 2], &[3.0, -1.0]);
        let w = t(&[1, 2], &[0.3, 0.9]);
        let u = t(&[1, 2], &[0.5, 2.0]);
        for f in [wkv_direct, wkv_recurrent] {
            let out = f(&k, &v, &w, &u).unwrap();
            // diag(u) kᵀ v
            assert_eq!(out.data(), &[1.5, -0.5, 12.0, -4.0]);
        }
    }

    #[test]
    fn scalar_three_step_hand_sum() {
        // t=1: 0.5·1·1; t=2: 0.5·2 + 1; t=3: 0.5·3 + 0.5·1 + 2
        let k = t(&[1, 3, 1], &[1.0, 1.0, 1.0]);
        let v = t(&[1, 3, 1], &[1.0, 2.0, 3.0]);
        let w = t(&[1, 1], &[0.5]);
        let u = t(&[1, 1], &[0.5]);
        assert_eq!(wkv_direct(&k, &v, &w, &u).unwrap().data(), &[0.5, 2.0, 4.0]);
        assert_eq!(wkv_recurrent(&k, &v, &w, &u).unwrap().data(), &[0.5, 2.0, 4.0]);
    }

    #[test]
    fn vanishing_decay_keeps_only_previous_token() {
        let k = t(&[1, 4, 1], &[0.7, -1.2, 2.0, 0.4]);
        let v = t(&[1, 4, 1], &[1.5, 0.3, -0.8, 2.2]);
        let w = t(&[1, 1], &[1e-12]);
        let u = t(&[1, 1], &[0.0]);
        let out = wkv_direct(&k, &v, &w, &u).unwrap();
        for step in 1..4 {
            let expect = k.data()[step - 1] * v.data()[step - 1];
            assert!((out.data()[step] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn decay_outside_unit_interval_is_rejected() {
        let k = t(&[1, 2, 1], &[1.0, 1.0]);
        let u = t(&[1, 1], &[0.0]);
        for bad in [0.0, 1.0, 1.5, -0.1] {
            let w = t(&[1, 1], &[bad]);
            assert!(matches!(wkv_direct(&k, &k, &w, &u), Err(Error::Contract(_))));
            assert!(matches!(wkv_recurrent(&k, &k, &w, &u), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn gate_scalar_and_annihilator() {
        let g: f64 = 0.8;
        let r = t(&[1, 1], &[(g / (1.0 - g)).ln()]);
        let wkv = t(&[1, 1, 1, 1], &[3.0]);
        let w_o = t(&[1, 1], &[1.0]);
        let o = multihead_gate(&r, &wkv, &w_o).unwrap();
        assert!((o.data()[0] - g * 3.0).abs() < 1e-12);

        let r = t(&[2, 4], &[0.3; 8]);
        let zero = Tensor::zeros(&[2, 2, 2, 2]);
        let w_o = Tensor::full(&[4, 4], 1.0);
        assert!(multihead_gate(&r, &zero, &w_o).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gate_at_zero_receptance_halves_column_sums() {
        // σ(0) = 0.5, so each head's output is 0.5 · (column sums of wkv_t)
        let r = Tensor::zeros(&[1, 4]);
        let wkv = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64 + 1.0);
        let w_o = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let o = multihead_gate(&r, &wkv, &w_o).unwrap();
        // head 0: [[1,2],[3,4]] -> 0.5·(4, 6); head 1: [[5,6],[7,8]] -> 0.5·(12, 14)
        assert_eq!(o.data(), &[2.0, 3.0, 6.0, 7.0]);
    }
}
