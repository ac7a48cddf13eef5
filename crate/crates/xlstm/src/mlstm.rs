//! mLSTM cell: matrix memory with covariance update. Provides the recurrent
//! forward/backward and the numerically stabilized parallel forward/backward;
//! the two routes are equivalent and tests enforce it.

use crate::error::{Error, Result};
use crate::numerics::sigmoid;
use crate::slstm::GateActivation;
use crate::tensor::{gemm_acc, matmul, Rng, Tensor};

/// Sentinel for -inf entries of the log-forget matrix; exp underflows to
/// exactly 0 without producing non-finite arithmetic.
pub const NEG_INF: f64 = -1e30;

/// Unstabilized denominator threshold ("typically 1.0").
pub const DENOM_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct MLstmParams {
    pub w_q: Tensor, // [d, d_in]
    pub b_q: Tensor, // [d]
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    /// Per-head scalar gate weights [num_heads, d_in] and biases [num_heads].
    pub w_i: Tensor,
    pub b_i: Tensor,
    pub w_f: Tensor,
    pub b_f: Tensor,
    /// Vector output gate; disabled when an external block gate is used.
    pub out_gate: Option<(Tensor, Tensor)>,
    pub num_heads: usize,
    pub forget_activation: GateActivation,
}

impl MLstmParams {
    pub fn d(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_in(&self) -> usize {
        self.w_q.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.d() / self.num_heads
    }

    pub fn init(
        d_in: usize,
        d: usize,
        num_heads: usize,
        forget_activation: GateActivation,
        with_out_gate: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if d % num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "mlstm: d={d} not divisible by num_heads={num_heads}"
            )));
        }
        let mut b_f = Tensor::zeros(&[num_heads]);
        let mut b_i = Tensor::zeros(&[num_heads]);
        for h in 0..num_heads {
            let frac = if num_heads > 1 {
                h as f64 / (num_heads - 1) as f64
            } else {
                0.0
            };
            b_f.data_mut()[h] = 3.0 + 3.0 * frac;
            b_i.data_mut()[h] = rng.normal_scaled(0.0, 0.1);
        }
        Ok(MLstmParams {
            w_q: rng.small_init_tensor(&[d, d_in], d_in),
            b_q: Tensor::zeros(&[d]),
            w_k: rng.small_init_tensor(&[d, d_in], d_in),
            b_k: Tensor::zeros(&[d]),
            w_v: rng.small_init_tensor(&[d, d_in], d_in),
            b_v: Tensor::zeros(&[d]),
            w_i: rng.small_init_tensor(&[num_heads, d_in], d_in),
            b_i,
            w_f: rng.small_init_tensor(&[num_heads, d_in], d_in),
            b_f,
            out_gate: if with_out_gate {
                Some((rng.small_init_tensor(&[d, d_in], d_in), Tensor::zeros(&[d])))
            } else {
                None
            },
            num_heads,
            forget_activation,
        })
    }

    pub fn zeros_like(&self) -> MLstmParams {
        MLstmParams {
            w_q: self.w_q.zeros_like(),
            b_q: self.b_q.zeros_like(),
            w_k: self.w_k.zeros_like(),
            b_k: self.b_k.zeros_like(),
            w_v: self.w_v.zeros_like(),
            b_v: self.b_v.zeros_like(),
            w_i: self.w_i.zeros_like(),
            b_i: self.b_i.zeros_like(),
            w_f: self.w_f.zeros_like(),
            b_f: self.b_f.zeros_like(),
            out_gate: self
                .out_gate
                .as_ref()
                .map(|(w, b)| (w.zeros_like(), b.zeros_like())),
            ..self.clone()
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        f("w_q".into(), &self.w_q);
        f("b_q".into(), &self.b_q);
        f("w_k".into(), &self.w_k);
        f("b_k".into(), &self.b_k);
        f("w_v".into(), &self.w_v);
        f("b_v".into(), &self.b_v);
        f("w_i".into(), &self.w_i);
        f("b_i".into(), &self.b_i);
        f("w_f".into(), &self.w_f);
        f("b_f".into(), &self.b_f);
        if let Some((w, b)) = &self.out_gate {
            f("w_o".into(), w);
            f("b_o".into(), b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("w_q".into(), &mut self.w_q);
        f("b_q".into(), &mut self.b_q);
        f("w_k".into(), &mut self.w_k);
        f("b_k".into(), &mut self.b_k);
        f("w_v".into(), &mut self.w_v);
        f("b_v".into(), &mut self.b_v);
        f("w_i".into(), &mut self.w_i);
        f("b_i".into(), &mut self.b_i);
        f("w_f".into(), &mut self.w_f);
        f("b_f".into(), &mut self.b_f);
        if let Some((w, b)) = &mut self.out_gate {
            f("w_o".into(), w);
            f("b_o".into(), b);
        }
    }
}

pub type MLstmGrads = MLstmParams;

/// Per-head recurrent state in the stabilized representation: C and n equal
/// the unstabilized states times exp(-m).
#[derive(Debug, Clone)]
pub struct MLstmHeadState {
    pub c: Tensor, // [hd, hd]
    pub n: Tensor, // [hd]
    pub m: f64,
}

impl MLstmHeadState {
    pub fn zeros(head_dim: usize) -> Self {
        MLstmHeadState {
            c: Tensor::zeros(&[head_dim, head_dim]),
            n: Tensor::zeros(&[head_dim]),
            m: 0.0,
        }
    }
}

/// Sequence projections shared by both evaluation routes. K carries the
/// 1/sqrt(head_dim) factor already.
pub struct Projections {
    pub q: Tensor,    // [T, d]
    pub k: Tensor,    // [T, d], scaled
    pub v: Tensor,    // [T, d]
    pub itil: Tensor, // [T, num_heads]
    pub ftil: Tensor, // [T, num_heads]
    pub otil: Option<Tensor>,
}

pub fn project(params: &MLstmParams, x_seq: &Tensor) -> Result<Projections> {
    let d_in = x_seq.cols();
    if d_in != params.d_in() {
        return Err(Error::ShapeMismatch(format!(
            "mlstm: input dim {d_in}, params expect {}",
            params.d_in()
        )));
    }
    let scale = 1.0 / (params.head_dim() as f64).sqrt();
    let add_bias = |y: &mut Tensor, b: &Tensor| {
        for t in 0..y.rows() {
            for (v, bv) in y.row_mut(t).iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    };
    let mut q = matmul(x_seq, false, &params.w_q, true);
    add_bias(&mut q, &params.b_q);
    let mut k = matmul(x_seq, false, &params.w_k, true);
    k.scale(scale);
    add_bias(&mut k, &params.b_k);
    let mut v = matmul(x_seq, false, &params.w_v, true);
    add_bias(&mut v, &params.b_v);
    let mut itil = matmul(x_seq, false, &params.w_i, true);
    add_bias(&mut itil, &params.b_i);
    let mut ftil = matmul(x_seq, false, &params.w_f, true);
    add_bias(&mut ftil, &params.b_f);
    let otil = match &params.out_gate {
        Some((w, b)) => {
            let mut o = matmul(x_seq, false, w, true);
            add_bias(&mut o, b);
            Some(o)
        }
        None => None,
    };
    Ok(Projections {
        q,
        k,
        v,
        itil,
        ftil,
        otil,
    })
}

/// Backward through `project`: accumulates parameter grads, returns dx.
#[allow(clippy::too_many_arguments)]
pub fn project_backward(
    params: &MLstmParams,
    x_seq: &Tensor,
    dq: &Tensor,
    dk: &Tensor,
    dv: &Tensor,
    ditil: &Tensor,
    dftil: &Tensor,
    dotil: Option<&Tensor>,
    grads: &mut MLstmGrads,
) -> Tensor {
    let t_len = x_seq.rows();
    let scale = 1.0 / (params.head_dim() as f64).sqrt();
    let mut dx = Tensor::zeros(&[t_len, x_seq.cols()]);

    let acc = |w: &Tensor, dw: &mut Tensor, db: &mut Tensor, dy: &Tensor, s: f64, dx: &mut Tensor| {
        if s == 1.0 {
            gemm_acc(dw, dy, true, x_seq, false);
            gemm_acc(dx, dy, false, w, false);
        } else {
            let mut dys = dy.clone();
            dys.scale(s);
            gemm_acc(dw, &dys, true, x_seq, false);
            gemm_acc(dx, &dys, false, w, false);
        }
        for t in 0..t_len {
            for (g, v) in db.data_mut().iter_mut().zip(dy.row(t)) {
                *g += v;
            }
        }
    };
    acc(&params.w_q, &mut grads.w_q, &mut grads.b_q, dq, 1.0, &mut dx);
    acc(&params.w_k, &mut grads.w_k, &mut grads.b_k, dk, scale, &mut dx);
    acc(&params.w_v, &mut grads.w_v, &mut grads.b_v, dv, 1.0, &mut dx);
    acc(&params.w_i, &mut grads.w_i, &mut grads.b_i, ditil, 1.0, &mut dx);
    acc(&params.w_f, &mut grads.w_f, &mut grads.b_f, dftil, 1.0, &mut dx);
    if let (Some((w, _)), Some(dotil)) = (&params.out_gate, dotil) {
        let (dw, db) = grads.out_gate.as_mut().expect("grads mirror params");
        acc(w, dw, db, dotil, 1.0, &mut dx);
    }
    dx
}

// ---------------------------------------------------------------------------
// Recurrent form
// ---------------------------------------------------------------------------

/// Per-head, per-step record for the recurrent backward.
pub struct RecStepCache {
    pub iprime: f64,
    pub fprime: f64,
    pub denom: f64,
    pub state: MLstmHeadState, // state after this step
}

pub struct MLstmRecCache {
    pub x: Tensor,
    pub proj: Projections,
    /// steps[head][t]
    pub steps: Vec<Vec<RecStepCache>>,
    pub htil: Tensor, // [T, d]
}

/// One stabilized recurrent step for a single head, given the projected
/// inputs of the step.
#[allow(clippy::too_many_arguments)]
pub fn head_step(
    state: &MLstmHeadState,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    itil: f64,
    ftil: f64,
    forget: GateActivation,
    htil_out: &mut [f64],
) -> (MLstmHeadState, f64, f64, f64) {
    let hd = q.len();
    let log_f = forget.log_gate(ftil);
    let m = (log_f + state.m).max(itil);
    let iprime = (itil - m).exp();
    let fprime = (log_f + state.m - m).exp();
    let mut c = state.c.clone();
    c.scale(fprime);
    for a in 0..hd {
        for b in 0..hd {
            c.data_mut()[a * hd + b] += iprime * v[a] * k[b];
        }
    }
    let mut n = state.n.clone();
    n.scale(fprime);
    for (nv, kv) in n.data_mut().iter_mut().zip(k) {
        *nv += iprime * kv;
    }
    let nq: f64 = n.data().iter().zip(q).map(|(a, b)| a * b).sum();
    let denom = nq.abs().max((DENOM_THRESHOLD.ln() - m).exp());
    for a in 0..hd {
        let mut acc = 0.0;
        for b in 0..hd {
            acc += c.data()[a * hd + b] * q[b];
        }
        htil_out[a] = acc / denom;
    }
    (MLstmHeadState { c, n, m }, iprime, fprime, denom)
}

/// One full-cell recurrent step: projects x, advances every head, applies
/// the output gate when enabled. Returns the new states and the hidden
/// vector.
pub fn mlstm_step(
    params: &MLstmParams,
    states: &[MLstmHeadState],
    x: &Tensor,
) -> Result<(Vec<MLstmHeadState>, Tensor)> {
    let x_row = x.clone().reshape(&[1, x.len()])?;
    let proj = project(params, &x_row)?;
    let hd = params.head_dim();
    let d = params.d();
    let mut h = Tensor::zeros(&[d]);
    let mut next = Vec::with_capacity(params.num_heads);
    for head in 0..params.num_heads {
        let lo = head * hd;
        let (st, _, _, _) = head_step(
            &states[head],
            &proj.q.row(0)[lo..lo + hd],
            &proj.k.row(0)[lo..lo + hd],
            &proj.v.row(0)[lo..lo + hd],
            proj.itil.at2(0, head),
            proj.ftil.at2(0, head),
            params.forget_activation,
            &mut h.data_mut()[lo..lo + hd],
        );
        if !st.c.all_finite() || !st.n.all_finite() || !st.m.is_finite() {
            return Err(Error::NonFinite {
                context: format!("mlstm_step head {head}"),
            });
        }
        next.push(st);
    }
    if let Some(otil) = &proj.otil {
        for (hv, &ov) in h.data_mut().iter_mut().zip(otil.row(0)) {
            *hv *= sigmoid(ov);
        }
    }
    Ok((next, h))
}

/// Recurrent forward over a sequence with zero initial state.
pub fn mlstm_recurrent_forward(
    params: &MLstmParams,
    x_seq: &Tensor,
) -> Result<(Tensor, MLstmRecCache)> {
    let t_len = x_seq.rows();
    let proj = project(params, x_seq)?;
    let hd = params.head_dim();
    let d = params.d();
    let mut htil = Tensor::zeros(&[t_len, d]);
    let mut steps: Vec<Vec<RecStepCache>> = (0..params.num_heads).map(|_| Vec::new()).collect();
    for head in 0..params.num_heads {
        let lo = head * hd;
        let mut state = MLstmHeadState::zeros(hd);
        for t in 0..t_len {
            let mut out = vec![0.0; hd];
            let (st, iprime, fprime, denom) = head_step(
                &state,
                &proj.q.row(t)[lo..lo + hd],
                &proj.k.row(t)[lo..lo + hd],
                &proj.v.row(t)[lo..lo + hd],
                proj.itil.at2(t, head),
                proj.ftil.at2(t, head),
                params.forget_activation,
                &mut out,
            );
            if !st.c.all_finite() || !st.n.all_finite() || !st.m.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("mlstm recurrent forward head {head} timestep {t}"),
                });
            }
            htil.row_mut(t)[lo..lo + hd].copy_from_slice(&out);
            steps[head].push(RecStepCache {
                iprime,
                fprime,
                denom,
                state: st.clone(),
            });
            state = st;
        }
    }
    let mut h = htil.clone();
    if let Some(otil) = &proj.otil {
        for (hv, &ov) in h.data_mut().iter_mut().zip(otil.data()) {
            *hv *= sigmoid(ov);
        }
    }
    let cache = MLstmRecCache {
        x: x_seq.clone(),
        proj,
        steps,
        htil,
    };
    Ok((h, cache))
}

/// Backward of the recurrent form. Returns (parameter grads, dx).
pub fn mlstm_recurrent_backward(
    params: &MLstmParams,
    cache: &MLstmRecCache,
    upstream: &Tensor,
) -> Result<(MLstmGrads, Tensor)> {
    let t_len = cache.x.rows();
    let d = params.d();
    let hd = params.head_dim();
    if upstream.rows() != t_len || upstream.cols() != d {
        return Err(Error::ShapeMismatch("mlstm_recurrent_backward upstream".into()));
    }
    let mut grads = params.zeros_like();

    // output gate chain
    let mut dhtil = upstream.clone();
    let mut dotil = None;
    if let Some(otil) = &cache.proj.otil {
        let mut doti = Tensor::zeros(&[t_len, d]);
        for i in 0..d * t_len {
            let o = sigmoid(otil.data()[i]);
            doti.data_mut()[i] = cache.htil.data()[i] * o * (1.0 - o) * upstream.data()[i];
            dhtil.data_mut()[i] = o * upstream.data()[i];
        }
        dotil = Some(doti);
    }

    let mut dq = Tensor::zeros(&[t_len, d]);
    let mut dk = Tensor::zeros(&[t_len, d]);
    let mut dv = Tensor::zeros(&[t_len, d]);
    let mut ditil = Tensor::zeros(&[t_len, params.num_heads]);
    let mut dftil = Tensor::zeros(&[t_len, params.num_heads]);

    for head in 0..params.num_heads {
        let lo = head * hd;
        let mut dc_carry = Tensor::zeros(&[hd, hd]);
        let mut dn_carry = Tensor::zeros(&[hd]);
        for t in (0..t_len).rev() {
            let step = &cache.steps[head][t];
            let q = &cache.proj.q.row(t)[lo..lo + hd];
            let k = &cache.proj.k.row(t)[lo..lo + hd];
            let v = &cache.proj.v.row(t)[lo..lo + hd];
            let dh = &dhtil.row(t)[lo..lo + hd];
            let c = &step.state.c;
            let n = &step.state.n;
            let denom = step.denom;
            let nq: f64 = n.data().iter().zip(q).map(|(a, b)| a * b).sum();
            let omega = if nq.abs() > (DENOM_THRESHOLD.ln() - step.state.m).exp() {
                nq.signum()
            } else {
                0.0
            };

            // dC_t = carry + outer(dhtil, q) / denom
            let mut dc = dc_carry.clone();
            for a in 0..hd {
                for b in 0..hd {
                    dc.data_mut()[a * hd + b] += dh[a] * q[b] / denom;
                }
            }
            // a = q^T C^T dhtil / denom^2
            let mut cq = vec![0.0; hd]; // C q
            for a in 0..hd {
                let mut acc = 0.0;
                for b in 0..hd {
                    acc += c.data()[a * hd + b] * q[b];
                }
                cq[a] = acc;
            }
            let qc_dh: f64 = cq.iter().zip(dh).map(|(a, b)| a * b).sum();
            let factor = qc_dh / (denom * denom) * omega;
            // dn_t = carry - factor * q
            let mut dn = dn_carry.clone();
            for (nv, qv) in dn.data_mut().iter_mut().zip(q) {
                *nv -= factor * qv;
            }

            // dq_t = C^T dhtil / denom - factor * n
            let dq_row = &mut dq.row_mut(t)[lo..lo + hd];
            for b in 0..hd {
                let mut acc = 0.0;
                for a in 0..hd {
                    acc += c.data()[a * hd + b] * dh[a];
                }
                dq_row[b] = acc / denom - factor * n.data()[b];
            }
            // dv = i' * dC k ; dk = i' * (dC^T v + dn)
            let iprime = step.iprime;
            let dv_row = &mut dv.row_mut(t)[lo..lo + hd];
            for a in 0..hd {
                let mut acc = 0.0;
                for b in 0..hd {
                    acc += dc.data()[a * hd + b] * k[b];
                }
                dv_row[a] = iprime * acc;
            }
            let dk_row = &mut dk.row_mut(t)[lo..lo + hd];
            for b in 0..hd {
                let mut acc = dn.data()[b];
                for a in 0..hd {
                    acc += dc.data()[a * hd + b] * v[a];
                }
                dk_row[b] = iprime * acc;
            }

            // gate pre-activation grads (stabilized representation; the
            // stabilizer m carries no gradient)
            let (c_prev, n_prev) = if t == 0 {
                (None, None)
            } else {
                let prev = &cache.steps[head][t - 1].state;
                (Some(&prev.c), Some(&prev.n))
            };
            let mut vk_dc = 0.0; // v^T dC k
            for a in 0..hd {
                for b in 0..hd {
                    vk_dc += v[a] * k[b] * dc.data()[a * hd + b];
                }
            }
            let k_dn: f64 = k.iter().zip(dn.data()).map(|(a, b)| a * b).sum();
            ditil.set2(t, head, (vk_dc + k_dn) * iprime);

            let fprime = step.fprime;
            let ftil = cache.proj.ftil.at2(t, head);
            let mut f_term = 0.0;
            if let (Some(cp), Some(np)) = (c_prev, n_prev) {
                for i in 0..hd * hd {
                    f_term += cp.data()[i] * dc.data()[i];
                }
                for i in 0..hd {
                    f_term += np.data()[i] * dn.data()[i];
                }
            }
            dftil.set2(
                t,
                head,
                f_term * fprime * params.forget_activation.dlog_gate(ftil),
            );

            // carries for t-1
            dc_carry = dc;
            dc_carry.scale(fprime);
            dn_carry = dn;
            dn_carry.scale(fprime);
        }
    }

    let dx = project_backward(
        params,
        &cache.x,
        &dq,
        &dk,
        &dv,
        &ditil,
        &dftil,
        dotil.as_ref(),
        &mut grads,
    );
    Ok((grads, dx))
}

// ---------------------------------------------------------------------------
// Parallel form
// ---------------------------------------------------------------------------

/// Stabilized gate-activation matrices for one head over a full sequence.
pub struct GateMatrices {
    /// Log-forget matrix: diagonal 0, cumulative sums below, NEG_INF above.
    pub fbar: Tensor, // [T, T]
    /// dtil = fbar + itil broadcast.
    pub dtil: Tensor, // [T, T]
    /// Row-wise maximum of dtil.
    pub m: Vec<f64>,
    /// exp(dtil - m), exactly zero above the diagonal, row max exactly 1.
    pub dprime: Tensor, // [T, T]
}

pub fn gate_matrices(itil: &[f64], ftil: &[f64], forget: GateActivation) -> GateMatrices {
    let t_len = itil.len();
    let mut cum = vec![0.0; t_len]; // cum[i] = sum_{k<=i} log f_k
    let mut acc = 0.0;
    for (i, &f) in ftil.iter().enumerate() {
        acc += forget.log_gate(f);
        cum[i] = acc;
    }
    let mut fbar = Tensor::full(&[t_len, t_len], NEG_INF);
    let mut dtil = Tensor::full(&[t_len, t_len], NEG_INF);
    let mut m = vec![NEG_INF; t_len];
    for i in 0..t_len {
        for j in 0..=i {
            let fb = if i == j { 0.0 } else { cum[i] - cum[j] };
            fbar.set2(i, j, fb);
            let dv = fb + itil[j];
            dtil.set2(i, j, dv);
            if dv > m[i] {
                m[i] = dv;
            }
        }
    }
    let mut dprime = Tensor::zeros(&[t_len, t_len]);
    for i in 0..t_len {
        for j in 0..=i {
            dprime.set2(i, j, (dtil.at2(i, j) - m[i]).exp());
        }
    }
    GateMatrices {
        fbar,
        dtil,
        m,
        dprime,
    }
}

/// Per-head cache of the parallel forward.
pub struct ParallelHeadCache {
    pub gates: GateMatrices,
    pub s: Tensor,     // Q K^T (K pre-scaled) [T, T]
    pub ctilp: Tensor, // s .* dprime
    pub b: Vec<f64>,   // row sums of ctilp
    pub n: Vec<f64>,   // max(|b|, exp(-m))
    pub c_mat: Tensor, // ctilp / n rows
}

pub struct MLstmParCache {
    pub x: Tensor,
    pub proj: Projections,
    pub heads: Vec<ParallelHeadCache>,
    pub htil: Tensor,
}

/// Parallel stabilized forward for one head. `q`, `k`, `v` are [T, hd] with
/// k already scaled by 1/sqrt(hd).
pub fn parallel_forward_head(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    itil: &[f64],
    ftil: &[f64],
    forget: GateActivation,
) -> Result<(Tensor, ParallelHeadCache)> {
    let t_len = q.rows();
    let gates = gate_matrices(itil, ftil, forget);
    let s = matmul(q, false, k, true);
    let mut ctilp = Tensor::zeros(&[t_len, t_len]);
    for i in 0..t_len {
        for j in 0..=i {
            ctilp.set2(i, j, s.at2(i, j) * gates.dprime.at2(i, j));
        }
    }
    let mut b = vec![0.0; t_len];
    let mut n = vec![0.0; t_len];
    let mut c_mat = Tensor::zeros(&[t_len, t_len]);
    for i in 0..t_len {
        let mut row_sum = 0.0;
        for j in 0..=i {
            row_sum += ctilp.at2(i, j);
        }
        b[i] = row_sum;
        n[i] = row_sum.abs().max((DENOM_THRESHOLD.ln() - gates.m[i]).exp());
        if !n[i].is_finite() || n[i] == 0.0 {
            return Err(Error::NonFinite {
                context: format!("parallel mlstm normalizer at row {i}"),
            });
        }
        let inv = 1.0 / n[i];
        for j in 0..=i {
            c_mat.set2(i, j, ctilp.at2(i, j) * inv);
        }
    }
    let htil = matmul(&c_mat, false, v, false);
    if !htil.all_finite() {
        return Err(Error::NonFinite {
            context: "parallel mlstm hidden pre-activations".into(),
        });
    }
    Ok((
        htil,
        ParallelHeadCache {
            gates,
            s,
            ctilp,
            b,
            n,
            c_mat,
        },
    ))
}

/// Parallel stabilized backward for one head. Returns
/// (dq, dk, dv, ditil, dftil) where dk is the gradient with respect to the
/// scaled keys.
pub fn parallel_backward_head(
    cache: &ParallelHeadCache,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dhtil: &Tensor,
) -> (Tensor, Tensor, Tensor, Vec<f64>, Vec<f64>) {
    let t_len = q.rows();

    // dC = dhtil V^T ; dV = C^T dhtil
    let dc = matmul(dhtil, false, v, true);
    let dv = matmul(&cache.c_mat, true, dhtil, false);

    // dn_i = -sum_j ctilp_ij dc_ij / n_i^2 ; db via the clamp indicator
    let mut dctilp = Tensor::zeros(&[t_len, t_len]);
    for i in 0..t_len {
        let mut s = 0.0;
        for j in 0..=i {
            s += cache.ctilp.at2(i, j) * dc.at2(i, j);
        }
        let dn = -s / (cache.n[i] * cache.n[i]);
        let active = cache.b[i].abs() > (DENOM_THRESHOLD.ln() - cache.gates.m[i]).exp();
        let db = if active { cache.b[i].signum() * dn } else { 0.0 };
        let inv_n = 1.0 / cache.n[i];
        for j in 0..=i {
            dctilp.set2(i, j, dc.at2(i, j) * inv_n + db);
        }
    }

    // dD' = S .* dC~' ; dDtil = D' .* dD'
    let mut ddprime_dctilp = Tensor::zeros(&[t_len, t_len]); // D' .* dC~' (for dQ/dK)
    let mut ddtil = Tensor::zeros(&[t_len, t_len]);
    for i in 0..t_len {
        for j in 0..=i {
            let dp = cache.gates.dprime.at2(i, j);
            let dct = dctilp.at2(i, j);
            ddprime_dctilp.set2(i, j, dp * dct);
            ddtil.set2(i, j, dp * cache.s.at2(i, j) * dct);
        }
    }

    let dq = matmul(&ddprime_dctilp, false, k, false);
    let dk = matmul(&ddprime_dctilp, true, q, false);

    // dfbar_k = sum_{j<k} sum_{i>=k} ddtil_ij ; ditil_k = column sums
    // computed via suffix row sums of the strictly-lower-triangular part
    let mut ditil = vec![0.0; t_len];
    for j in 0..t_len {
        let mut s = 0.0;
        for i in j..t_len {
            s += ddtil.at2(i, j);
        }
        ditil[j] = s;
    }
    let mut dfbar = vec![0.0; t_len];
    // rowsum_tail[i] = sum over j < k of ddtil_ij for the current k; build
    // with a prefix structure: for each k, sum_{i>=k} sum_{j<=k-1} ddtil_ij.
    // Use cumulative column sums from the bottom.
    let mut col_suffix = vec![0.0; t_len]; // sum_{i>=k} ddtil_ij for current k
    // start with k = t_len-1... iterate k from high to low, maintaining
    // col_suffix over rows >= k, then dfbar_k = sum_{j<k} col_suffix[j].
    for k in (1..t_len).rev() {
        for j in 0..=k.min(t_len - 1) {
            col_suffix[j] += ddtil.at2(k, j);
        }
        let mut s = 0.0;
        for cs in col_suffix.iter().take(k) {
            s += cs;
        }
        dfbar[k] = s;
    }
    (dq, dk, dv, ditil, dfbar)
}

/// Parallel forward over a full [T, d_in] sequence with zero initial state.
pub fn mlstm_parallel_forward(
    params: &MLstmParams,
    x_seq: &Tensor,
) -> Result<(Tensor, MLstmParCache)> {
    let t_len = x_seq.rows();
    let proj = project(params, x_seq)?;
    let hd = params.head_dim();
    let d = params.d();
    let mut htil = Tensor::zeros(&[t_len, d]);
    let mut heads = Vec::with_capacity(params.num_heads);
    for head in 0..params.num_heads {
        let lo = head * hd;
        let slice = |src: &Tensor| -> Tensor {
            let mut out = Tensor::zeros(&[t_len, hd]);
            for t in 0..t_len {
                out.row_mut(t).copy_from_slice(&src.row(t)[lo..lo + hd]);
            }
            out
        };
        let qh = slice(&proj.q);
        let kh = slice(&proj.k);
        let vh = slice(&proj.v);
        let itil: Vec<f64> = (0..t_len).map(|t| proj.itil.at2(t, head)).collect();
        let ftil: Vec<f64> = (0..t_len).map(|t| proj.ftil.at2(t, head)).collect();
        let (h_head, cache) =
            parallel_forward_head(&qh, &kh, &vh, &itil, &ftil, params.forget_activation)?;
        for t in 0..t_len {
            htil.row_mut(t)[lo..lo + hd].copy_from_slice(h_head.row(t));
        }
        heads.push(cache);
    }
    let mut h = htil.clone();
    if let Some(otil) = &proj.otil {
        for (hv, &ov) in h.data_mut().iter_mut().zip(otil.data()) {
            *hv *= sigmoid(ov);
        }
    }
    Ok((
        h,
        MLstmParCache {
            x: x_seq.clone(),
            proj,
            heads,
            htil,
        },
    ))
}

/// Backward of the parallel form. Returns (parameter grads, dx).
pub fn mlstm_parallel_backward(
    params: &MLstmParams,
    cache: &MLstmParCache,
    upstream: &Tensor,
) -> Result<(MLstmGrads, Tensor)> {
    let t_len = cache.x.rows();
    let d = params.d();
    let hd = params.head_dim();
    if upstream.rows() != t_len || upstream.cols() != d {
        return Err(Error::ShapeMismatch("mlstm_parallel_backward upstream".into()));
    }
    let mut grads = params.zeros_like();

    let mut dhtil = upstream.clone();
    let mut dotil = None;
    if let Some(otil) = &cache.proj.otil {
        let mut doti = Tensor::zeros(&[t_len, d]);
        for i in 0..d * t_len {
            let o = sigmoid(otil.data()[i]);
            doti.data_mut()[i] = cache.htil.data()[i] * o * (1.0 - o) * upstream.data()[i];
            dhtil.data_mut()[i] = o * upstream.data()[i];
        }
        dotil = Some(doti);
    }

    let mut dq = Tensor::zeros(&[t_len, d]);
    let mut dk = Tensor::zeros(&[t_len, d]);
    let mut dv = Tensor::zeros(&[t_len, d]);
    let mut ditil = Tensor::zeros(&[t_len, params.num_heads]);
    let mut dftil = Tensor::zeros(&[t_len, params.num_heads]);

    for head in 0..params.num_heads {
        let lo = head * hd;
        let slice = |src: &Tensor| -> Tensor {
            let mut out = Tensor::zeros(&[t_len, hd]);
            for t in 0..t_len {
                out.row_mut(t).copy_from_slice(&src.row(t)[lo..lo + hd]);
            }
            out
        };
        let qh = slice(&cache.proj.q);
        let kh = slice(&cache.proj.k);
        let vh = slice(&cache.proj.v);
        let dh = slice(&dhtil);
        let (dqh, dkh, dvh, dih, dfbar) =
            parallel_backward_head(&cache.heads[head], &qh, &kh, &vh, &dh);
        for t in 0..t_len {
            dq.row_mut(t)[lo..lo + hd].copy_from_slice(dqh.row(t));
            dk.row_mut(t)[lo..lo + hd].copy_from_slice(dkh.row(t));
            dv.row_mut(t)[lo..lo + hd].copy_from_slice(dvh.row(t));
            ditil.set2(t, head, dih[t]);
            let ftil = cache.proj.ftil.at2(t, head);
            dftil.set2(t, head, params.forget_activation.dlog_gate(ftil) * dfbar[t]);
        }
    }

    let dx = project_backward(
        params,
        &cache.x,
        &dq,
        &dk,
        &dv,
        &ditil,
        &dftil,
        dotil.as_ref(),
        &mut grads,
    );
    Ok((grads, dx))
}
