//! Recurrent cells and dense layers built on the tape.
//!
//! Gate conventions:
//!
//! * GRU: `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
//!   `h̃ = tanh(W_h x + U_h (r∘h) + b_h)`, `h' = (1 − z)∘h + z∘h̃`
//! * LSTM: gates `i, f, o` are sigmoids and `g` is tanh;
//!   `c' = f∘c + i∘g`, `h' = o∘tanh(c')`
//!
//! Gate weights are stored stacked (`[W_z; W_r; W_h]` and `[W_i; W_f; W_o; W_g]`)
//! so one matrix-vector product feeds all gates.

use rand::Rng;

use super::tape::{dot, sigmoid};
use super::{NnError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    w: Var,
    b: Var,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{prefix}.w"), &[output, input], input, rng);
        let b = store.add_uniform(format!("{prefix}.b"), &[output], input, rng);
        Self { w, b, input, output }
    }

    pub fn bind(&self, tape: &Tape, store: &ParamStore) -> BoundLinear {
        BoundLinear {
            w: tape.param(store, self.w),
            b: tape.param(store, self.b),
        }
    }
}

impl BoundLinear {
    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var, NnError> {
        let wx = tape.matmul(self.w, x)?;
        tape.add(wx, self.b)
    }
}

#[derive(Debug, Clone)]
pub struct GruCell {
    /// `[3H, D]` input weights for z, r, h̃.
    pub w: ParamId,
    /// `[2H, H]` recurrent weights for z, r.
    pub u_zr: ParamId,
    /// `[H, H]` recurrent weights for h̃.
    pub u_h: ParamId,
    /// `[3H]`
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGru {
    w: Var,
    u_zr: Var,
    u_h: Var,
    b: Var,
    hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{prefix}.w"), &[3 * hidden, input], input, rng);
        let u_zr = store.add_uniform(format!("{prefix}.u_zr"), &[2 * hidden, hidden], hidden, rng);
        let u_h = store.add_uniform(format!("{prefix}.u_h"), &[hidden, hidden], hidden, rng);
        let b = store.add_uniform(format!("{prefix}.b"), &[3 * hidden], hidden, rng);
        Self {
            w,
            u_zr,
            u_h,
            b,
            input,
            hidden,
        }
    }

    pub fn bind(&self, tape: &Tape, store: &ParamStore) -> BoundGru {
        BoundGru {
            w: tape.param(store, self.w),
            u_zr: tape.param(store, self.u_zr),
            u_h: tape.param(store, self.u_h),
            b: tape.param(store, self.b),
            hidden: self.hidden,
        }
    }
}

impl BoundGru {
    pub fn step(&self, tape: &Tape, x: Var, h: Var) -> Result<Var, NnError> {
        let hd = self.hidden;
        let wx = tape.matmul(self.w, x)?;
        let wx = tape.add(wx, self.b)?;
        let uh = tape.matmul(self.u_zr, h)?;

        let z = tape.add(tape.slice(wx, 0, hd)?, tape.slice(uh, 0, hd)?)?;
        let z = tape.sigmoid(z);
        let r = tape.add(tape.slice(wx, hd, hd)?, tape.slice(uh, hd, hd)?)?;
        let r = tape.sigmoid(r);

        let rh = tape.mul(r, h)?;
        let cand = tape.add(tape.slice(wx, 2 * hd, hd)?, tape.matmul(self.u_h, rh)?)?;
        let cand = tape.tanh(cand);

        // (1 - z)∘h + z∘h̃
        let keep = tape.mul(tape.offset(tape.scale(z, -1.0), 1.0), h)?;
        let update = tape.mul(z, cand)?;
        tape.add(keep, update)
    }

    /// Runs the cell over `xs` from a zero state, returning every hidden state.
    pub fn run(&self, tape: &Tape, xs: &[Var]) -> Result<Vec<Var>, NnError> {
        let mut h = tape.constant(Tensor::zeros(&[self.hidden]));
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            h = self.step(tape, x, h)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Bidirectional GRU: the output at step `t` is `[forward_t ; backward_t]`.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub forward: GruCell,
    pub backward: GruCell,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBiGru {
    forward: BoundGru,
    backward: BoundGru,
}

impl BiGru {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            forward: GruCell::new(store, &format!("{prefix}.fwd"), input, hidden, rng),
            backward: GruCell::new(store, &format!("{prefix}.bwd"), input, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    pub fn bind(&self, tape: &Tape, store: &ParamStore) -> BoundBiGru {
        BoundBiGru {
            forward: self.forward.bind(tape, store),
            backward: self.backward.bind(tape, store),
        }
    }
}

impl BoundBiGru {
    pub fn run(&self, tape: &Tape, xs: &[Var]) -> Result<Vec<Var>, NnError> {
        if xs.is_empty() {
            return Err(NnError::Argument("bidirectional GRU over an empty sequence".into()));
        }
        let fwd = self.forward.run(tape, xs)?;
        let rev: Vec<Var> = xs.iter().rev().copied().collect();
        let mut bwd = self.backward.run(tape, &rev)?;
        bwd.reverse();
        fwd.into_iter()
            .zip(bwd)
            .map(|(f, b)| tape.concat(&[f, b]))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LstmCell {
    /// `[4H, D]` input weights for i, f, o, g.
    pub w: ParamId,
    /// `[4H, H]`
    pub u: ParamId,
    /// `[4H]`
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    w: Var,
    u: Var,
    b: Var,
    hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{prefix}.w"), &[4 * hidden, input], input, rng);
        let u = store.add_uniform(format!("{prefix}.u"), &[4 * hidden, hidden], hidden, rng);
        let b = store.add_uniform(format!("{prefix}.b"), &[4 * hidden], hidden, rng);
        Self {
            w,
            u,
            b,
            input,
            hidden,
        }
    }

    pub fn bind(&self, tape: &Tape, store: &ParamStore) -> BoundLstm {
        BoundLstm {
            w: tape.param(store, self.w),
            u: tape.param(store, self.u),
            b: tape.param(store, self.b),
            hidden: self.hidden,
        }
    }
}

impl BoundLstm {
    /// One step; returns `(h', c')`.
    pub fn step(&self, tape: &Tape, x: Var, h: Var, c: Var) -> Result<(Var, Var), NnError> {
        let hd = self.hidden;
        let gates = tape.add(tape.matmul(self.w, x)?, tape.matmul(self.u, h)?)?;
        let gates = tape.add(gates, self.b)?;
        let i = tape.sigmoid(tape.slice(gates, 0, hd)?);
        let f = tape.sigmoid(tape.slice(gates, hd, hd)?);
        let o = tape.sigmoid(tape.slice(gates, 2 * hd, hd)?);
        let g = tape.tanh(tape.slice(gates, 3 * hd, hd)?);
        let c_next = tape.add(tape.mul(f, c)?, tape.mul(i, g)?)?;
        let h_next = tape.mul(o, tape.tanh(c_next))?;
        Ok((h_next, c_next))
    }
}

/// Layers of LSTM cells, each consuming the hidden sequence of the one below.
#[derive(Debug, Clone)]
pub struct StackedLstm {
    pub layers: Vec<LstmCell>,
}

impl StackedLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|k| {
                let inp = if k == 0 { input } else { hidden };
                LstmCell::new(store, &format!("{prefix}.{k}"), inp, hidden, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }

    /// Final hidden state of the top layer after consuming `xs`.
    pub fn run(&self, tape: &Tape, store: &ParamStore, xs: &[Var]) -> Result<Var, NnError> {
        let mut seq = xs.to_vec();
        for layer in &self.layers {
            let bound = layer.bind(tape, store);
            let mut h = tape.constant(Tensor::zeros(&[layer.hidden]));
            let mut c = tape.constant(Tensor::zeros(&[layer.hidden]));
            for x in seq.iter_mut() {
                (h, c) = bound.step(tape, *x, h, c)?;
                *x = h;
            }
        }
        seq.last()
            .copied()
            .ok_or_else(|| NnError::Argument("LSTM over an empty sequence".into()))
    }
}

// Tape-free forward passes for inference. They perform the same floating-point
// operations in the same order as the tape versions, so results agree bitwise.

fn matvec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    let k = m.shape()[1];
    m.data().chunks_exact(k.max(1)).take(m.shape()[0]).map(|row| dot(row, x)).collect()
}

fn add_into(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

impl Linear {
    pub fn forward_plain(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut y = matvec(store.value(self.w), x);
        add_into(&mut y, store.value(self.b).data());
        y
    }
}

impl GruCell {
    pub fn step_plain(&self, store: &ParamStore, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hd = self.hidden;
        let mut wx = matvec(store.value(self.w), x);
        add_into(&mut wx, store.value(self.b).data());
        let uh = matvec(store.value(self.u_zr), h);
        let z: Vec<f64> = (0..hd).map(|i| sigmoid(wx[i] + uh[i])).collect();
        let r: Vec<f64> = (0..hd).map(|i| sigmoid(wx[hd + i] + uh[hd + i])).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let uc = matvec(store.value(self.u_h), &rh);
        (0..hd)
            .map(|i| {
                let cand = (wx[2 * hd + i] + uc[i]).tanh();
                (-z[i] + 1.0) * h[i] + z[i] * cand
            })
            .collect()
    }

    pub fn run_plain(&self, store: &ParamStore, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut h = vec![0.0; self.hidden];
        xs.iter()
            .map(|x| {
                h = self.step_plain(store, x, &h);
                h.clone()
            })
            .collect()
    }
}

impl BiGru {
    pub fn run_plain(&self, store: &ParamStore, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, NnError> {
        if xs.is_empty() {
            return Err(NnError::Argument("bidirectional GRU over an empty sequence".into()));
        }
        let fwd = self.forward.run_plain(store, xs);
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let mut bwd = self.backward.run_plain(store, &rev);
        bwd.reverse();
        Ok(fwd.into_iter().zip(bwd).map(|(mut f, b)| {
            f.extend(b);
            f
        }).collect())
    }
}

impl LstmCell {
    pub fn step_plain(&self, store: &ParamStore, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hd = self.hidden;
        let mut gates = matvec(store.value(self.w), x);
        add_into(&mut gates, &matvec(store.value(self.u), h));
        add_into(&mut gates, store.value(self.b).data());
        let mut h_next = Vec::with_capacity(hd);
        let mut c_next = Vec::with_capacity(hd);
        for k in 0..hd {
            let i = sigmoid(gates[k]);
            let f = sigmoid(gates[hd + k]);
            let o = sigmoid(gates[2 * hd + k]);
            let g = gates[3 * hd + k].tanh();
            let cn = f * c[k] + i * g;
            c_next.push(cn);
            h_next.push(o * cn.tanh());
        }
        (h_next, c_next)
    }
}

impl StackedLstm {
    pub fn run_plain(&self, store: &ParamStore, xs: &[Vec<f64>]) -> Result<Vec<f64>, NnError> {
        let mut seq = xs.to_vec();
        for layer in &self.layers {
            let mut h = vec![0.0; layer.hidden];
            let mut c = vec![0.0; layer.hidden];
            for x in seq.iter_mut() {
                (h, c) = layer.step_plain(store, x, &h, &c);
                *x = h.clone();
            }
        }
        seq.pop()
            .ok_or_else(|| NnError::Argument("LSTM over an empty sequence".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn row(m: &Tensor, r: usize) -> &[f64] {
        let cols = m.shape()[1];
        &m.data()[r * cols..(r + 1) * cols]
    }

    fn dotp(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Scalar re-implementation of the GRU equations.
    fn gru_oracle(store: &ParamStore, cell: &GruCell, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hd = cell.hidden;
        let (w, uzr, uh, b) = (
            store.value(cell.w),
            store.value(cell.u_zr),
            store.value(cell.u_h),
            store.value(cell.b).data(),
        );
        let z: Vec<f64> = (0..hd)
            .map(|j| sig(dotp(row(w, j), x) + dotp(row(uzr, j), h) + b[j]))
            .collect();
        let r: Vec<f64> = (0..hd)
            .map(|j| sig(dotp(row(w, hd + j), x) + dotp(row(uzr, hd + j), h) + b[hd + j]))
            .collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        (0..hd)
            .map(|j| {
                let c = (dotp(row(w, 2 * hd + j), x) + dotp(row(uh, j), &rh) + b[2 * hd + j]).tanh();
                (1.0 - z[j]) * h[j] + z[j] * c
            })
            .collect()
    }

    fn lstm_oracle(store: &ParamStore, cell: &LstmCell, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hd = cell.hidden;
        let (w, u, b) = (store.value(cell.w), store.value(cell.u), store.value(cell.b).data());
        let gate = |k: usize, j: usize| dotp(row(w, k * hd + j), x) + dotp(row(u, k * hd + j), h) + b[k * hd + j];
        let mut hn = vec![0.0; hd];
        let mut cn = vec![0.0; hd];
        for j in 0..hd {
            let (i, f, o, g) = (sig(gate(0, j)), sig(gate(1, j)), sig(gate(2, j)), gate(3, j).tanh());
            cn[j] = f * c[j] + i * g;
            hn[j] = o * cn[j].tanh();
        }
        (hn, cn)
    }

    #[test]
    fn gru_zero_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 3, 4, &mut rng);
        store.zero_values();
        let tape = Tape::new();
        let bound = cell.bind(&tape, &store);
        let x = tape.constant(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let h = tape.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 4.0]));
        let out = tape.value(bound.step(&tape, x, h).unwrap());
        assert_eq!(out.data(), &[0.5, -1.0, 0.25, 2.0]);
        let h0 = tape.constant(Tensor::zeros(&[4]));
        let out = tape.value(bound.step(&tape, x, h0).unwrap());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 3, 5, &mut rng);
        let x = vec![0.2, -0.7, 1.1];
        let h = vec![0.1, -0.3, 0.9, 0.0, -0.5];
        let tape = Tape::new();
        let bound = cell.bind(&tape, &store);
        let vx = tape.constant(Tensor::vector(x.clone()));
        let vh = tape.constant(Tensor::vector(h.clone()));
        let out = tape.value(bound.step(&tape, vx, vh).unwrap());
        for (a, b) in out.data().iter().zip(gru_oracle(&store, &cell, &x, &h)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_zero_params_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "l", 2, 3, &mut rng);
        let x = vec![0.5, -1.5];
        let h = vec![0.2, 0.4, -0.6];
        let c = vec![1.0, -2.0, 0.3];

        let tape = Tape::new();
        let bound = cell.bind(&tape, &store);
        let (vx, vh, vc) = (
            tape.constant(Tensor::vector(x.clone())),
            tape.constant(Tensor::vector(h.clone())),
            tape.constant(Tensor::vector(c.clone())),
        );
        let (hn, cn) = bound.step(&tape, vx, vh, vc).unwrap();
        let (oh, oc) = lstm_oracle(&store, &cell, &x, &h, &c);
        for (a, b) in tape.value(hn).data().iter().zip(&oh) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.value(cn).data().iter().zip(&oc) {
            assert!((a - b).abs() < 1e-12);
        }

        store.zero_values();
        let tape = Tape::new();
        let bound = cell.bind(&tape, &store);
        let (vx, vh, vc) = (
            tape.constant(Tensor::vector(x.clone())),
            tape.constant(Tensor::vector(h.clone())),
            tape.constant(Tensor::vector(c.clone())),
        );
        let (hn, cn) = bound.step(&tape, vx, vh, vc).unwrap();
        for j in 0..3 {
            assert_eq!(tape.value(cn).data()[j], 0.5 * c[j]);
            assert_eq!(tape.value(hn).data()[j], 0.5 * (0.5 * c[j]).tanh());
        }
        let zeros = tape.constant(Tensor::zeros(&[3]));
        let (hn, _) = bound.step(&tape, vx, zeros, zeros).unwrap();
        assert!(tape.value(hn).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bigru_reversal_swaps_halves_when_tied() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let bi = BiGru::new(&mut store, "b", 3, 4, &mut rng);
        // tie backward weights to forward weights
        let pairs = [
            (bi.forward.w, bi.backward.w),
            (bi.forward.u_zr, bi.backward.u_zr),
            (bi.forward.u_h, bi.backward.u_h),
            (bi.forward.b, bi.backward.b),
        ];
        for (f, b) in pairs {
            let v = store.value(f).clone();
            *store.value_mut(b) = v;
        }
        let xs: Vec<Vec<f64>> = (0..5)
            .map(|i| vec![i as f64 * 0.1, 1.0 - i as f64 * 0.3, (i % 2) as f64])
            .collect();
        let run = |store: &ParamStore, seq: &[Vec<f64>]| {
            let tape = Tape::new();
            let bound = bi.bind(&tape, store);
            let vars: Vec<_> = seq.iter().map(|x| tape.constant(Tensor::vector(x.clone()))).collect();
            bound
                .run(&tape, &vars)
                .unwrap()
                .into_iter()
                .map(|v| tape.value(v).into_data())
                .collect::<Vec<_>>()
        };
        let out = run(&store, &xs);
        let rev: Vec<_> = xs.iter().rev().cloned().collect();
        let mut out_rev = run(&store, &rev);
        out_rev.reverse();
        for (a, b) in out.iter().zip(&out_rev) {
            assert_eq!(a[..4], b[4..]);
            assert_eq!(a[4..], b[..4]);
        }

        // length-1 sequences run both directions over the single element
        let single = run(&store, &xs[..1]);
        assert_eq!(single[0][..4], single[0][4..]);

        store.zero_values();
        assert!(run(&store, &xs).iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn plain_paths_match_tape_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let gru = BiGru::new(&mut store, "g", 3, 4, &mut rng);
        let lstm = StackedLstm::new(&mut store, "l", 3, 5, 2, &mut rng);
        let lin = Linear::new(&mut store, "o", 5, 2, &mut rng);
        let xs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.3 - 1.0, 0.5, (i % 2) as f64]).collect();
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(Tensor::vector(x.clone()))).collect();
        let g_tape = gru.bind(&tape, &store).run(&tape, &vars).unwrap();
        let g_plain = gru.run_plain(&store, &xs).unwrap();
        for (a, b) in g_tape.iter().zip(&g_plain) {
            assert_eq!(tape.value(*a).data(), b.as_slice());
        }
        let h = lstm.run(&tape, &store, &vars).unwrap();
        let y = lin.bind(&tape, &store).forward(&tape, h).unwrap();
        let h_plain = lstm.run_plain(&store, &xs).unwrap();
        assert_eq!(tape.value(h).data(), h_plain.as_slice());
        assert_eq!(tape.value(y).data(), lin.forward_plain(&store, &h_plain).as_slice());
    }
}
