//! sLSTM cell: multi-cell recurrent forward with exponential gating,
//! normalizer/stabilizer states and block-diagonal memory mixing, plus the
//! matching hand-written backward recurrence. Also houses the vanilla LSTM
//! cell used as an ablation baseline.

use crate::error::{Error, Result};
use crate::numerics::{logsigmoid, sigmoid, Activation, BlockDiagLinear};
use crate::tensor::{gemm_acc, matmul, Rng, Tensor};

/// Gate order used throughout: cell input, input gate, forget gate, output gate.
pub const GATE_Z: usize = 0;
pub const GATE_I: usize = 1;
pub const GATE_F: usize = 2;
pub const GATE_O: usize = 3;
pub const GATE_NAMES: [&str; 4] = ["z", "i", "f", "o"];

/// Activation choice for the exponential-family gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateActivation {
    Exp,
    Sigmoid,
}

impl GateActivation {
    /// log of the gate value at pre-activation x.
    #[inline]
    pub fn log_gate(self, x: f64) -> f64 {
        match self {
            GateActivation::Exp => x,
            GateActivation::Sigmoid => logsigmoid(x),
        }
    }

    /// d(log gate)/d(pre-activation).
    #[inline]
    pub fn dlog_gate(self, x: f64) -> f64 {
        match self {
            GateActivation::Exp => 1.0,
            GateActivation::Sigmoid => sigmoid(-x),
        }
    }
}

/// Input-side projection: dense by default, block-diagonal as a config
/// alternative (the block figure can be read either way).
#[derive(Debug, Clone)]
pub enum InputProj {
    /// Weight [d, d_in].
    Dense(Tensor),
    Block(BlockDiagLinear),
}

impl InputProj {
    pub fn forward_seq(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            InputProj::Dense(w) => Ok(matmul(x, false, w, true)),
            InputProj::Block(b) => b.forward(x),
        }
    }

    pub fn zeros_like(&self) -> InputProj {
        match self {
            InputProj::Dense(w) => InputProj::Dense(w.zeros_like()),
            InputProj::Block(b) => {
                let mut z = b.clone();
                z.w = b.w.zeros_like();
                z.b = None;
                InputProj::Block(z)
            }
        }
    }

    pub fn weights(&self) -> &Tensor {
        match self {
            InputProj::Dense(w) => w,
            InputProj::Block(b) => &b.w,
        }
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        match self {
            InputProj::Dense(w) => w,
            InputProj::Block(b) => &mut b.w,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SLstmParams {
    /// Input weights per gate, order z, i, f, o.
    pub w: [InputProj; 4],
    /// Block-diagonal recurrent weights per gate (memory mixing within heads).
    pub r: [BlockDiagLinear; 4],
    pub b: [Tensor; 4],
    pub num_heads: usize,
    pub input_activation: GateActivation,
    pub forget_activation: GateActivation,
    /// Cell input activation phi (tanh in the block architectures).
    pub cell_activation: Activation,
}

impl SLstmParams {
    pub fn d(&self) -> usize {
        self.b[0].len()
    }

    /// Fresh cell with small-init weights and the gating-ablation bias
    /// initialization: forget biases equidistant in [3, 6], input biases
    /// Normal(0, 0.1).
    pub fn init(
        d_in: usize,
        d: usize,
        num_heads: usize,
        forget_activation: GateActivation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if d % num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "slstm: d={d} not divisible by num_heads={num_heads}"
            )));
        }
        let hd = d / num_heads;
        let w = std::array::from_fn(|_| {
            InputProj::Dense(rng.small_init_tensor(&[d, d_in], d_in))
        });
        let r = std::array::from_fn(|_| {
            BlockDiagLinear::new(rng.small_init_tensor(&[num_heads, hd, hd], hd), None, num_heads)
                .expect("consistent block shape")
        });
        let mut b: [Tensor; 4] = std::array::from_fn(|_| Tensor::zeros(&[d]));
        for c in 0..d {
            let frac = if d > 1 { c as f64 / (d - 1) as f64 } else { 0.0 };
            b[GATE_F].data_mut()[c] = 3.0 + 3.0 * frac;
            b[GATE_I].data_mut()[c] = rng.normal_scaled(0.0, 0.1);
        }
        Ok(SLstmParams {
            w,
            r,
            b,
            num_heads,
            input_activation: GateActivation::Exp,
            forget_activation,
            cell_activation: Activation::Tanh,
        })
    }

    pub fn zeros_like(&self) -> SLstmParams {
        SLstmParams {
            w: std::array::from_fn(|g| self.w[g].zeros_like()),
            r: std::array::from_fn(|g| {
                let mut z = self.r[g].clone();
                z.w = self.r[g].w.zeros_like();
                z.b = None;
                z
            }),
            b: std::array::from_fn(|g| self.b[g].zeros_like()),
            ..self.clone()
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        for g in 0..4 {
            f(format!("w_{}", GATE_NAMES[g]), self.w[g].weights());
            f(format!("r_{}", GATE_NAMES[g]), &self.r[g].w);
            f(format!("b_{}", GATE_NAMES[g]), &self.b[g]);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for g in 0..4 {
            f(format!("w_{}", GATE_NAMES[g]), self.w[g].weights_mut());
            f(format!("r_{}", GATE_NAMES[g]), &mut self.r[g].w);
            f(format!("b_{}", GATE_NAMES[g]), &mut self.b[g]);
        }
    }
}

/// Per-timestep recurrent state: cell, normalizer, stabilizer, hidden.
#[derive(Debug, Clone)]
pub struct SLstmState {
    pub c: Tensor,
    pub n: Tensor,
    pub m: Tensor,
    pub h: Tensor,
}

impl SLstmState {
    pub fn zeros(d: usize) -> Self {
        SLstmState {
            c: Tensor::zeros(&[d]),
            n: Tensor::zeros(&[d]),
            m: Tensor::zeros(&[d]),
            h: Tensor::zeros(&[d]),
        }
    }
}

/// Everything the backward recurrence reads, stored per timestep as [T, d]
/// planes (stabilized gate values and states).
pub struct SLstmCache {
    pub x: Tensor,
    /// Separate input stream for the i/f gates (block architectures route
    /// the causal-conv path there); None when all gates share `x`.
    pub x_gate: Option<Tensor>,
    pub pre: [Tensor; 4], // gate pre-activations
    pub iprime: Tensor,
    pub fprime: Tensor,
    pub z: Tensor,
    pub o: Tensor,
    pub c: Tensor,
    pub n: Tensor,
    pub m: Tensor,
    pub h: Tensor,
    pub state0: SLstmState,
}

impl SLstmCache {
    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.rows() == 0
    }
}

/// Gradients of a scalar loss with respect to the cell parameters; same
/// layout as `SLstmParams` via `zeros_like`.
pub type SLstmGrads = SLstmParams;

fn check_finite(state: &SLstmState, t: usize) -> Result<()> {
    for (name, v) in [
        ("c", &state.c),
        ("n", &state.n),
        ("m", &state.m),
        ("h", &state.h),
    ] {
        if !v.all_finite() {
            return Err(Error::NonFinite {
                context: format!("slstm state component {name} at timestep {t}"),
            });
        }
    }
    Ok(())
}

/// One recurrent step. Exposed mainly for tests and generation; training
/// uses `slstm_forward`.
pub fn slstm_step(
    params: &SLstmParams,
    state: &SLstmState,
    x: &Tensor,
) -> Result<(SLstmState, [Tensor; 4])> {
    let x_row = x.clone().reshape(&[1, x.len()])?;
    let (h_seq, cache, final_state) = slstm_forward(params, &x_row, state)?;
    let _ = h_seq;
    let pre = std::array::from_fn(|g| {
        Tensor::from_vec(&[params.d()], cache.pre[g].row(0).to_vec()).expect("row copy")
    });
    Ok((final_state, pre))
}

/// Sequential forward over a [T, d_in] input. Returns the hidden sequence
/// [T, d], the backward cache and the final state.
pub fn slstm_forward(
    params: &SLstmParams,
    x_seq: &Tensor,
    state0: &SLstmState,
) -> Result<(Tensor, SLstmCache, SLstmState)> {
    slstm_forward_split(params, x_seq, None, state0)
}

/// Forward with distinct input streams: z/o gates read `x_seq`, i/f gates
/// read `x_gate` when given (the block's conv-Swish path).
pub fn slstm_forward_split(
    params: &SLstmParams,
    x_seq: &Tensor,
    x_gate: Option<&Tensor>,
    state0: &SLstmState,
) -> Result<(Tensor, SLstmCache, SLstmState)> {
    let t_len = x_seq.rows();
    let d = params.d();
    if t_len == 0 {
        return Err(Error::InvalidConfig("slstm_forward: T must be >= 1".into()));
    }
    if let Some(xg) = x_gate {
        if xg.rows() != t_len {
            return Err(Error::ShapeMismatch("slstm_forward_split: x_gate rows".into()));
        }
    }
    let x_if = x_gate.unwrap_or(x_seq);

    // Input contributions for all gates and timesteps in one pass.
    let mut pre: [Tensor; 4] = [
        params.w[GATE_Z].forward_seq(x_seq)?,
        params.w[GATE_I].forward_seq(x_if)?,
        params.w[GATE_F].forward_seq(x_if)?,
        params.w[GATE_O].forward_seq(x_seq)?,
    ];

    let mut iprime = Tensor::zeros(&[t_len, d]);
    let mut fprime = Tensor::zeros(&[t_len, d]);
    let mut zp = Tensor::zeros(&[t_len, d]);
    let mut op = Tensor::zeros(&[t_len, d]);
    let mut cp = Tensor::zeros(&[t_len, d]);
    let mut np = Tensor::zeros(&[t_len, d]);
    let mut mp = Tensor::zeros(&[t_len, d]);
    let mut hp = Tensor::zeros(&[t_len, d]);

    let mut state = state0.clone();
    for t in 0..t_len {
        // recurrent contributions and biases
        for g in 0..4 {
            let row = pre[g].row_mut(t);
            params.r[g].apply_row(state.h.data(), row);
            for (v, b) in row.iter_mut().zip(params.b[g].data()) {
                *v += b;
            }
        }
        let mut next = SLstmState::zeros(d);
        for c in 0..d {
            let ztil = pre[GATE_Z].at2(t, c);
            let itil = pre[GATE_I].at2(t, c);
            let ftil = pre[GATE_F].at2(t, c);
            let otil = pre[GATE_O].at2(t, c);
            let log_f = params.forget_activation.log_gate(ftil);
            let log_i = params.input_activation.log_gate(itil);
            let m_prev = state.m.data()[c];
            let m = (log_f + m_prev).max(log_i);
            let ip = (log_i - m).exp();
            let fp = (log_f + m_prev - m).exp();
            let z = params.cell_activation.eval(ztil);
            let o = sigmoid(otil);
            let cv = fp * state.c.data()[c] + ip * z;
            let nv = fp * state.n.data()[c] + ip;
            let hv = o * (cv / nv);
            iprime.set2(t, c, ip);
            fprime.set2(t, c, fp);
            zp.set2(t, c, z);
            op.set2(t, c, o);
            next.c.data_mut()[c] = cv;
            next.n.data_mut()[c] = nv;
            next.m.data_mut()[c] = m;
            next.h.data_mut()[c] = hv;
        }
        check_finite(&next, t)?;
        cp.row_mut(t).copy_from_slice(next.c.data());
        np.row_mut(t).copy_from_slice(next.n.data());
        mp.row_mut(t).copy_from_slice(next.m.data());
        hp.row_mut(t).copy_from_slice(next.h.data());
        state = next;
    }

    let cache = SLstmCache {
        x: x_seq.clone(),
        x_gate: x_gate.cloned(),
        pre,
        iprime,
        fprime,
        z: zp,
        o: op,
        c: cp,
        n: np,
        m: mp,
        h: hp.clone(),
        state0: state0.clone(),
    };
    Ok((hp, cache, state))
}

/// Backward recurrence. `clip_recurrent` clamps the recurrent hidden-state
/// gradient contribution elementwise to [-10, 10]; it must be disabled for
/// finite-difference checks.
pub fn slstm_backward(
    params: &SLstmParams,
    cache: &SLstmCache,
    upstream: &Tensor,
    clip_recurrent: bool,
) -> Result<(SLstmGrads, Tensor)> {
    let (grads, dx, dx_gate) = slstm_backward_split(params, cache, upstream, clip_recurrent)?;
    debug_assert!(dx_gate.is_none());
    Ok((grads, dx))
}

/// Backward matching `slstm_forward_split`; the second returned gradient is
/// for the i/f input stream when one was used.
pub fn slstm_backward_split(
    params: &SLstmParams,
    cache: &SLstmCache,
    upstream: &Tensor,
    clip_recurrent: bool,
) -> Result<(SLstmGrads, Tensor, Option<Tensor>)> {
    let t_len = cache.len();
    let d = params.d();
    if upstream.rows() != t_len || upstream.cols() != d {
        return Err(Error::ShapeMismatch(format!(
            "slstm_backward: upstream {:?}, cache [{t_len},{d}]",
            upstream.shape()
        )));
    }

    let mut grads = params.zeros_like();
    // per-gate pre-activation gradients, gathered for batched W/x grads
    let mut dpre: [Tensor; 4] = std::array::from_fn(|_| Tensor::zeros(&[t_len, d]));

    let mut dh_rec: Vec<f64> = vec![0.0; d]; // recurrent contribution flowing into step t
    let mut dc_carry = vec![0.0; d];
    let mut dn_carry = vec![0.0; d];

    for t in (0..t_len).rev() {
        let h_prev = if t == 0 {
            cache.state0.h.data()
        } else {
            cache.h.row(t - 1)
        };
        let c_prev = if t == 0 {
            cache.state0.c.data()
        } else {
            cache.c.row(t - 1)
        };
        let n_prev = if t == 0 {
            cache.state0.n.data()
        } else {
            cache.n.row(t - 1)
        };

        for c in 0..d {
            let mut rec = dh_rec[c];
            if clip_recurrent {
                rec = rec.clamp(-10.0, 10.0);
            }
            let dh = upstream.at2(t, c) + rec;
            let o = cache.o.at2(t, c);
            let cv = cache.c.at2(t, c);
            let nv = cache.n.at2(t, c);
            let htil = cv / nv;
            let dhtil = o * dh;
            let dc = dc_carry[c] + dhtil / nv;
            let dn = dn_carry[c] - (cv / (nv * nv)) * dhtil;

            let itil = cache.pre[GATE_I].at2(t, c);
            let ftil = cache.pre[GATE_F].at2(t, c);
            let ztil = cache.pre[GATE_Z].at2(t, c);
            let otil = cache.pre[GATE_O].at2(t, c);
            let ip = cache.iprime.at2(t, c);
            let fp = cache.fprime.at2(t, c);
            let z = cache.z.at2(t, c);

            let dftil =
                fp * params.forget_activation.dlog_gate(ftil) * (c_prev[c] * dc + n_prev[c] * dn);
            let ditil = ip * params.input_activation.dlog_gate(itil) * (z * dc + dn);
            let dztil = ip * params.cell_activation.deriv(ztil) * dc;
            let so = sigmoid(otil);
            let dotil = so * (1.0 - so) * htil * dh;

            dpre[GATE_Z].set2(t, c, dztil);
            dpre[GATE_I].set2(t, c, ditil);
            dpre[GATE_F].set2(t, c, dftil);
            dpre[GATE_O].set2(t, c, dotil);

            dc_carry[c] = fp * dc;
            dn_carry[c] = fp * dn;
        }

        // recurrent weight grads and the gradient flowing to h_{t-1}
        dh_rec.iter_mut().for_each(|v| *v = 0.0);
        for g in 0..4 {
            let gy = dpre[g].row(t);
            params.r[g].accumulate_weight_grad(h_prev, gy, &mut grads.r[g].w);
            params.r[g].apply_row_transpose(gy, &mut dh_rec);
            for (bg, v) in grads.b[g].data_mut().iter_mut().zip(gy) {
                *bg += v;
            }
        }
    }

    // input-side grads, batched over the sequence
    let d_in = cache.x.cols();
    let mut dx = Tensor::zeros(&[t_len, d_in]);
    let mut dx_gate = cache
        .x_gate
        .as_ref()
        .map(|xg| Tensor::zeros(&[t_len, xg.cols()]));
    for g in 0..4 {
        let gate_stream = g == GATE_I || g == GATE_F;
        let (x_in, dst) = match (&cache.x_gate, &mut dx_gate) {
            (Some(xg), Some(dxg)) if gate_stream => (xg, &mut *dxg),
            _ => (&cache.x, &mut dx),
        };
        match (&params.w[g], &mut grads.w[g]) {
            (InputProj::Dense(w), InputProj::Dense(dw)) => {
                gemm_acc(dw, &dpre[g], true, x_in, false);
                gemm_acc(dst, &dpre[g], false, w, false);
            }
            (InputProj::Block(bw), InputProj::Block(dbw)) => {
                let part = bw.backward(x_in, &dpre[g], &mut dbw.w, None);
                dst.add_assign(&part);
            }
            _ => unreachable!("params/grads projection kinds always match"),
        }
    }
    Ok((grads, dx, dx_gate))
}

/// Vanilla LSTM parameters: dense recurrent matrices, all gates sigmoid,
/// cell squashing psi = tanh.
#[derive(Debug, Clone)]
pub struct VanillaLstmParams {
    pub w: [Tensor; 4], // [d, d_in] per gate, order z, i, f, o
    pub r: [Tensor; 4], // [d, d]
    pub b: [Tensor; 4],
}

#[derive(Debug, Clone)]
pub struct VanillaLstmState {
    pub c: Tensor,
    pub h: Tensor,
}

impl VanillaLstmState {
    pub fn zeros(d: usize) -> Self {
        VanillaLstmState {
            c: Tensor::zeros(&[d]),
            h: Tensor::zeros(&[d]),
        }
    }
}

impl VanillaLstmParams {
    pub fn init(d_in: usize, d: usize, rng: &mut Rng) -> Self {
        VanillaLstmParams {
            w: std::array::from_fn(|_| rng.small_init_tensor(&[d, d_in], d_in)),
            r: std::array::from_fn(|_| rng.small_init_tensor(&[d, d], d)),
            b: std::array::from_fn(|_| Tensor::zeros(&[d])),
        }
    }
}

/// One vanilla LSTM step: c_t = f . c + i . z, h_t = o . tanh(c_t).
pub fn lstm_step(
    params: &VanillaLstmParams,
    state: &VanillaLstmState,
    x: &Tensor,
) -> Result<VanillaLstmState> {
    let d = params.b[0].len();
    let mut pre = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    for g in 0..4 {
        for c in 0..d {
            let mut acc = params.b[g].data()[c];
            let wr = params.w[g].row(c);
            for (wv, xv) in wr.iter().zip(x.data()) {
                acc += wv * xv;
            }
            let rr = params.r[g].row(c);
            for (rv, hv) in rr.iter().zip(state.h.data()) {
                acc += rv * hv;
            }
            pre[g][c] = acc;
        }
    }
    let mut next = VanillaLstmState::zeros(d);
    for c in 0..d {
        let z = pre[GATE_Z][c].tanh();
        let i = sigmoid(pre[GATE_I][c]);
        let f = sigmoid(pre[GATE_F][c]);
        let o = sigmoid(pre[GATE_O][c]);
        let cv = f * state.c.data()[c] + i * z;
        next.c.data_mut()[c] = cv;
        next.h.data_mut()[c] = o * cv.tanh();
    }
    if !next.c.all_finite() || !next.h.all_finite() {
        return Err(Error::NonFinite {
            context: "lstm_step state".into(),
        });
    }
    Ok(next)
}
