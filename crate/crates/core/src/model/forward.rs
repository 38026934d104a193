use crate::alibi::{bias_value, PositionalBias};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::tensor::{attend_row, matmul_a_bt, matmul_at_b_acc, matmul_into, KeyEntry, Matrix, Scalar};

use super::{
    ModelParams, TokenId, B1, B2, EMBED, LN1_B, LN1_G, LN2_B, LN2_G, W1, W2, WK, WO, WQ, WV,
};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Normalises one row; writes `gain * xhat + offset` to `out` and `xhat` to
/// `xhat_out`. Returns `1 / std`.
pub(crate) fn layer_norm_row<T: Scalar>(
    x: &[T],
    gain: &[T],
    offset: &[T],
    out: &mut [T],
    xhat_out: &mut [T],
) -> T {
    let n = T::from_count(x.len());
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + T::lit(LN_EPS)).sqrt();
    for i in 0..x.len() {
        let xh = (x[i] - mean) * rstd;
        xhat_out[i] = xh;
        out[i] = gain[i] * xh + offset[i];
    }
    rstd
}

#[inline]
pub(crate) fn gelu<T: Scalar>(u: T) -> T {
    let inner = T::lit(GELU_C) * (u + T::lit(GELU_A) * u * u * u);
    T::lit(0.5) * u * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(u: T) -> T {
    let inner = T::lit(GELU_C) * (u + T::lit(GELU_A) * u * u * u);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * u * u);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * u * (T::one() - t * t) * dinner
}

pub(crate) struct LayerActs<T> {
    xhat1: Matrix<T>,
    rstd1: Vec<T>,
    a1: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// `[row][head]` attention probabilities over `visible[row]`.
    probs: Vec<Vec<Vec<T>>>,
    attn: Matrix<T>,
    xhat2: Matrix<T>,
    rstd2: Vec<T>,
    a2: Matrix<T>,
    u: Matrix<T>,
    g: Matrix<T>,
}

/// Activations of a full-sequence pass, kept for back-propagation.
pub(crate) struct ForwardActs<T> {
    tokens: Vec<TokenId>,
    visible: Vec<Vec<usize>>,
    layers: Vec<LayerActs<T>>,
    final_xhat: Matrix<T>,
    final_rstd: Vec<T>,
    /// Output of the final layer norm, `L x d_model`.
    pub(crate) hidden: Matrix<T>,
}

fn check_inputs<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[TokenId],
    mask: &AttentionMask,
    biases: &[PositionalBias],
) -> Result<()> {
    let cfg = params.config();
    let n = tokens.len();
    if n == 0 {
        return Err(Error::EmptyInput("forward pass over no tokens"));
    }
    if mask.rows() != n || mask.cols() != n {
        return Err(Error::Shape(format!(
            "{n} tokens but mask is {}x{}",
            mask.rows(),
            mask.cols()
        )));
    }
    if biases.len() != cfg.n_heads {
        return Err(Error::Shape(format!(
            "{} bias matrices for {} heads",
            biases.len(),
            cfg.n_heads
        )));
    }
    for b in biases {
        if b.len() != n {
            return Err(Error::Shape(format!("bias is {0}x{0}, expected {n}x{n}", b.len())));
        }
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token {t} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    for i in 0..n {
        if mask.visible_count(i) == 0 {
            return Err(Error::DegenerateRow { row: i });
        }
        for j in mask.visible_in_row(i) {
            if biases.iter().any(|b| b.distance(i, j).is_none()) {
                return Err(Error::Shape(format!("bias undefined on visible entry ({i}, {j})")));
            }
        }
    }
    Ok(())
}

pub(crate) fn forward_with_acts<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[TokenId],
    mask: &AttentionMask,
    biases: &[PositionalBias],
) -> Result<ForwardActs<T>> {
    check_inputs(params, tokens, mask, biases)?;
    let cfg = params.config();
    let (n, d, ff, dh) = (tokens.len(), cfg.d_model, cfg.d_ff(), cfg.d_head());
    let visible: Vec<Vec<usize>> = (0..n).map(|i| mask.visible_in_row(i).collect()).collect();
    // additive[row][head][entry]
    let additive: Vec<Vec<Vec<T>>> = (0..n)
        .map(|i| {
            biases
                .iter()
                .map(|b| {
                    visible[i]
                        .iter()
                        .map(|&j| bias_value(b.slope(), b.distance(i, j).unwrap()))
                        .collect()
                })
                .collect()
        })
        .collect();

    let embed = params.tensor(EMBED);
    let mut x = Matrix::zeros(n, d);
    for (i, &t) in tokens.iter().enumerate() {
        x.row_mut(i).copy_from_slice(embed.row(t as usize));
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let mut xhat1 = Matrix::zeros(n, d);
        let mut a1 = Matrix::zeros(n, d);
        let mut rstd1 = vec![T::zero(); n];
        let (g1, b1) = (params.layer(l, LN1_G).data(), params.layer(l, LN1_B).data());
        for i in 0..n {
            let (xr, ar) = (x.row(i), a1.row_mut(i));
            let mut xh = vec![T::zero(); d];
            rstd1[i] = layer_norm_row(xr, g1, b1, ar, &mut xh);
            xhat1.row_mut(i).copy_from_slice(&xh);
        }
        let mut q = Matrix::zeros(n, d);
        let mut k = Matrix::zeros(n, d);
        let mut v = Matrix::zeros(n, d);
        matmul_into(a1.data(), n, d, params.layer(l, WQ).data(), d, q.data_mut());
        matmul_into(a1.data(), n, d, params.layer(l, WK).data(), d, k.data_mut());
        matmul_into(a1.data(), n, d, params.layer(l, WV).data(), d, v.data_mut());

        let mut attn = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(n);
        for i in 0..n {
            let mut row_probs = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let entries: Vec<KeyEntry<'_, T>> = visible[i]
                    .iter()
                    .zip(&additive[i][h])
                    .map(|(&j, &add)| KeyEntry {
                        key: &k.row(j)[cols.clone()],
                        value: &v.row(j)[cols.clone()],
                        additive: add,
                    })
                    .collect();
                let p = attend_row(&q.row(i)[cols.clone()], &entries, &mut attn.row_mut(i)[cols]);
                row_probs.push(p);
            }
            probs.push(row_probs);
        }
        let mut proj = vec![T::zero(); n * d];
        matmul_into(attn.data(), n, d, params.layer(l, WO).data(), d, &mut proj);
        for (xv, pv) in x.data_mut().iter_mut().zip(&proj) {
            *xv = *xv + *pv;
        }

        let mut xhat2 = Matrix::zeros(n, d);
        let mut a2 = Matrix::zeros(n, d);
        let mut rstd2 = vec![T::zero(); n];
        let (g2, b2) = (params.layer(l, LN2_G).data(), params.layer(l, LN2_B).data());
        for i in 0..n {
            let mut xh = vec![T::zero(); d];
            rstd2[i] = layer_norm_row(x.row(i), g2, b2, a2.row_mut(i), &mut xh);
            xhat2.row_mut(i).copy_from_slice(&xh);
        }
        let mut u = Matrix::zeros(n, ff);
        matmul_into(a2.data(), n, d, params.layer(l, W1).data(), ff, u.data_mut());
        let bias1 = params.layer(l, B1).data();
        for i in 0..n {
            for (uv, bv) in u.row_mut(i).iter_mut().zip(bias1) {
                *uv = *uv + *bv;
            }
        }
        let g = Matrix::from_vec(n, ff, u.data().iter().map(|&z| gelu(z)).collect())?;
        let mut f = vec![T::zero(); n * d];
        matmul_into(g.data(), n, ff, params.layer(l, W2).data(), d, &mut f);
        let bias2 = params.layer(l, B2).data();
        for i in 0..n {
            for c in 0..d {
                let xv = &mut x.data_mut()[i * d + c];
                *xv = *xv + (f[i * d + c] + bias2[c]);
            }
        }
        layers.push(LayerActs {
            xhat1,
            rstd1,
            a1,
            q,
            k,
            v,
            probs,
            attn,
            xhat2,
            rstd2,
            a2,
            u,
            g,
        });
    }

    let (gf, bf) = (params.final_tensor(0).data(), params.final_tensor(1).data());
    let mut hidden = Matrix::zeros(n, d);
    let mut final_xhat = Matrix::zeros(n, d);
    let mut final_rstd = vec![T::zero(); n];
    for i in 0..n {
        let mut xh = vec![T::zero(); d];
        final_rstd[i] = layer_norm_row(x.row(i), gf, bf, hidden.row_mut(i), &mut xh);
        final_xhat.row_mut(i).copy_from_slice(&xh);
    }
    Ok(ForwardActs {
        tokens: tokens.to_vec(),
        visible,
        layers,
        final_xhat,
        final_rstd,
        hidden,
    })
}

/// Final-layer-norm outputs for every position.
pub fn forward_hidden<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[TokenId],
    mask: &AttentionMask,
    biases: &[PositionalBias],
) -> Result<Matrix<T>> {
    Ok(forward_with_acts(params, tokens, mask, biases)?.hidden)
}

/// Output projection of hidden rows.
pub fn project_logits<T: Scalar>(params: &ModelParams<T>, hidden: &Matrix<T>) -> Matrix<T> {
    let cfg = params.config();
    let mut out = Matrix::zeros(hidden.rows(), cfg.vocab_size);
    matmul_into(
        hidden.data(),
        hidden.rows(),
        cfg.d_model,
        params.final_tensor(2).data(),
        cfg.vocab_size,
        out.data_mut(),
    );
    out
}

/// Logits for every position of `tokens` under an explicit mask and one bias
/// matrix per head.
pub fn forward_full<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[TokenId],
    mask: &AttentionMask,
    biases: &[PositionalBias],
) -> Result<Matrix<T>> {
    let hidden = forward_hidden(params, tokens, mask, biases)?;
    Ok(project_logits(params, &hidden))
}

/// Back-propagates through a layer norm; accumulates gain/offset gradients
/// and returns the input gradient.
fn layer_norm_backward<T: Scalar>(
    dy: &Matrix<T>,
    xhat: &Matrix<T>,
    rstd: &[T],
    gain: &[T],
    dgain: &mut [T],
    doffset: &mut [T],
) -> Matrix<T> {
    let (n, d) = dy.shape();
    let nd = T::from_count(d);
    let mut dx = Matrix::zeros(n, d);
    for i in 0..n {
        let (dyr, xr) = (dy.row(i), xhat.row(i));
        let mut dxhat = vec![T::zero(); d];
        for c in 0..d {
            dgain[c] = dgain[c] + dyr[c] * xr[c];
            doffset[c] = doffset[c] + dyr[c];
            dxhat[c] = dyr[c] * gain[c];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<T>() / nd;
        let mean_dxhat_xhat = dxhat.iter().zip(xr).map(|(a, b)| *a * *b).sum::<T>() / nd;
        let out = dx.row_mut(i);
        for c in 0..d {
            out[c] = rstd[i] * (dxhat[c] - mean_dxhat - xr[c] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Gradients of `sum(dlogits * logits)` with respect to every parameter
/// tensor, in storage order.
pub(crate) fn backward<T: Scalar>(
    params: &ModelParams<T>,
    acts: &ForwardActs<T>,
    dlogits: &Matrix<T>,
) -> Vec<Matrix<T>> {
    let cfg = params.config();
    let (n, d, ff, dh, v) = (
        acts.tokens.len(),
        cfg.d_model,
        cfg.d_ff(),
        cfg.d_head(),
        cfg.vocab_size,
    );
    let scale = T::from_count(dh).sqrt();
    let mut grads = params.zeros_like();
    let n_tensors = grads.len();

    // Output projection and final layer norm.
    matmul_at_b_acc(
        acts.hidden.data(),
        n,
        d,
        dlogits.data(),
        v,
        grads[n_tensors - 1].data_mut(),
    );
    let mut dhidden = Matrix::zeros(n, d);
    matmul_a_bt(
        dlogits.data(),
        n,
        v,
        params.final_tensor(2).data(),
        d,
        dhidden.data_mut(),
    );
    let (_, tail) = grads.split_at_mut(n_tensors - 3);
    let (dgf, rest) = tail.split_at_mut(1);
    let mut dx = layer_norm_backward(
        &dhidden,
        &acts.final_xhat,
        &acts.final_rstd,
        params.final_tensor(0).data(),
        dgf[0].data_mut(),
        rest[0].data_mut(),
    );

    for l in (0..cfg.n_layers).rev() {
        let la = &acts.layers[l];
        let base = super::layer_tensor(l, 0);
        let g = &mut grads[base..base + super::PER_LAYER];

        // Feed-forward block.
        matmul_at_b_acc(la.g.data(), n, ff, dx.data(), d, g[W2].data_mut());
        let gb2 = g[B2].data_mut();
        for i in 0..n {
            for c in 0..d {
                gb2[c] = gb2[c] + dx.get(i, c);
            }
        }
        let mut du = Matrix::zeros(n, ff);
        matmul_a_bt(dx.data(), n, d, params.layer(l, W2).data(), ff, du.data_mut());
        for (dv, &uv) in du.data_mut().iter_mut().zip(la.u.data()) {
            *dv = *dv * gelu_grad(uv);
        }
        matmul_at_b_acc(la.a2.data(), n, d, du.data(), ff, g[W1].data_mut());
        let gb1 = g[B1].data_mut();
        for i in 0..n {
            for c in 0..ff {
                gb1[c] = gb1[c] + du.get(i, c);
            }
        }
        let mut da2 = Matrix::zeros(n, d);
        matmul_a_bt(du.data(), n, ff, params.layer(l, W1).data(), d, da2.data_mut());
        let (g_ln2g, g_rest) = g.split_at_mut(LN2_B);
        let dx_ln2 = layer_norm_backward(
            &da2,
            &la.xhat2,
            &la.rstd2,
            params.layer(l, LN2_G).data(),
            g_ln2g[LN2_G].data_mut(),
            g_rest[0].data_mut(),
        );
        for (a, b) in dx.data_mut().iter_mut().zip(dx_ln2.data()) {
            *a = *a + *b;
        }

        // Attention block.
        matmul_at_b_acc(la.attn.data(), n, d, dx.data(), d, g[WO].data_mut());
        let mut dattn = Matrix::zeros(n, d);
        matmul_a_bt(dx.data(), n, d, params.layer(l, WO).data(), d, dattn.data_mut());
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for i in 0..n {
            for h in 0..cfg.n_heads {
                let c0 = h * dh;
                let p = &la.probs[i][h];
                let dout = &dattn.row(i)[c0..c0 + dh];
                let dp: Vec<T> = acts.visible[i]
                    .iter()
                    .map(|&j| crate::tensor::dot(dout, &la.v.row(j)[c0..c0 + dh]))
                    .collect();
                let weighted: T = p.iter().zip(&dp).map(|(a, b)| *a * *b).sum();
                for (e, &j) in acts.visible[i].iter().enumerate() {
                    let ds = p[e] * (dp[e] - weighted) / scale;
                    for c in 0..dh {
                        let dvr = &mut dv.row_mut(j)[c0 + c];
                        *dvr = *dvr + p[e] * dout[c];
                    }
                    for c in 0..dh {
                        let kv = la.k.get(j, c0 + c);
                        let qv = la.q.get(i, c0 + c);
                        let dqr = &mut dq.row_mut(i)[c0 + c];
                        *dqr = *dqr + ds * kv;
                        let dkr = &mut dk.row_mut(j)[c0 + c];
                        *dkr = *dkr + ds * qv;
                    }
                }
            }
        }
        matmul_at_b_acc(la.a1.data(), n, d, dq.data(), d, g[WQ].data_mut());
        matmul_at_b_acc(la.a1.data(), n, d, dk.data(), d, g[WK].data_mut());
        matmul_at_b_acc(la.a1.data(), n, d, dv.data(), d, g[WV].data_mut());
        let mut da1 = Matrix::zeros(n, d);
        let mut tmp = vec![T::zero(); n * d];
        for (dm, w) in [(&dq, WQ), (&dk, WK), (&dv, WV)] {
            matmul_a_bt(dm.data(), n, d, params.layer(l, w).data(), d, &mut tmp);
            for (a, b) in da1.data_mut().iter_mut().zip(&tmp) {
                *a = *a + *b;
            }
        }
        let (g_ln1g, g_rest) = g.split_at_mut(LN1_B);
        let dx_ln1 = layer_norm_backward(
            &da1,
            &la.xhat1,
            &la.rstd1,
            params.layer(l, LN1_G).data(),
            g_ln1g[LN1_G].data_mut(),
            g_rest[0].data_mut(),
        );
        for (a, b) in dx.data_mut().iter_mut().zip(dx_ln1.data()) {
            *a = *a + *b;
        }
    }

    let dembed = grads[EMBED].data_mut();
    for (i, &t) in acts.tokens.iter().enumerate() {
        let row = &mut dembed[t as usize * d..(t as usize + 1) * d];
        for (a, b) in row.iter_mut().zip(dx.row(i)) {
            *a = *a + *b;
        }
    }
    grads
}
