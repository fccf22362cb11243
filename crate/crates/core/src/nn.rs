//! Layers built on the tape: affine maps, embeddings and LSTMs.
//!
//! Layers only hold parameter names and sizes; values live in a
//! [`ParamStore`] so one store can be checkpointed and optimized as a unit.
//!
//! LSTM gates are packed `[input | forget | cell | output]` along the
//! column axis of `wx: [in, 4H]`, `wh: [H, 4H]` and `b: [4H]`, all
//! initialized uniform in `±1/√H`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// `input · weights + bias` with the bias broadcast over rows.
pub fn linear_forward<'t>(input: Var<'t>, weights: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
    let out = input.matmul(weights)?;
    match bias {
        Some(b) => out.add_row(b),
        None => Ok(out),
    }
}

/// Rows of `table` picked by `ids`.
pub fn embedding_lookup<'t>(table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
    if ids.is_empty() {
        return Ok(table
            .tape()
            .constant(Tensor::zeros(&[0, table.cols()])));
    }
    table.gather_rows(ids)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = format!("{name}.w");
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        store.register_random(&weight, &[input, output], Init::Uniform(bound), rng)?;
        let bias = if bias {
            let b = format!("{name}.b");
            store.register(&b, &[output], Init::Zeros)?;
            Some(b)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            input,
            output,
        })
    }

    /// Refer to parameters already present in a store.
    pub fn existing(store: &ParamStore, name: &str) -> Result<Self> {
        let weight = format!("{name}.w");
        let w = store
            .get(&weight)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{weight}`")))?;
        let (input, output) = (w.rows(), w.cols());
        let b = format!("{name}.b");
        Ok(Linear {
            weight,
            bias: store.contains(&b).then_some(b),
            input,
            output,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        if x.cols() != self.input {
            return Err(Error::Shape(format!(
                "linear `{}` expects {} inputs, got {:?}",
                self.weight,
                self.input,
                x.dims()
            )));
        }
        let w = tape.param(store, &self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(store, b));
        linear_forward(x, w, b)
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.bias.as_deref()
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = format!("{name}.table");
        store.register_random(&table, &[vocab, dim], Init::Uniform(0.5), rng)?;
        Ok(Embedding { table, vocab, dim })
    }

    pub fn existing(store: &ParamStore, name: &str) -> Result<Self> {
        let table = format!("{name}.table");
        let t = store
            .get(&table)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{table}`")))?;
        Ok(Embedding {
            vocab: t.rows(),
            dim: t.cols(),
            table,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, ids: &[usize]) -> Result<Var<'t>> {
        let t = tape.param(store, &self.table);
        embedding_lookup(t, ids)
    }
}

/// Bound LSTM parameters on one tape.
#[derive(Clone, Copy)]
pub struct LstmWeights<'t> {
    pub wx: Var<'t>,
    pub wh: Var<'t>,
    pub b: Var<'t>,
}

/// One gated update. `x: [1, in]`, `h, c: [1, H]`.
pub fn lstm_cell<'t>(
    x: Var<'t>,
    h: Var<'t>,
    c: Var<'t>,
    w: &LstmWeights<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let xp = x.matmul(w.wx)?.add_row(w.b)?;
    lstm_step(xp, h, c, w.wh)
}

/// The recurrent half of a cell, given the input projection `x·wx + b`.
pub fn lstm_step<'t>(
    x_proj: Var<'t>,
    h: Var<'t>,
    c: Var<'t>,
    wh: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let hidden = h.cols();
    if x_proj.cols() != 4 * hidden || c.cols() != hidden {
        return Err(Error::Shape(format!(
            "lstm: gates {:?}, h {:?}, c {:?}",
            x_proj.dims(),
            h.dims(),
            c.dims()
        )));
    }
    let gates = x_proj.add(h.matmul(wh)?)?;
    let i = gates.slice_cols(0, hidden)?.sigmoid();
    let f = gates.slice_cols(hidden, hidden)?.sigmoid();
    let g = gates.slice_cols(2 * hidden, hidden)?.tanh();
    let o = gates.slice_cols(3 * hidden, hidden)?.sigmoid();
    let c_next = f.mul(c)?.add(i.mul(g)?)?;
    let h_next = o.mul(c_next.tanh())?;
    Ok((h_next, c_next))
}

#[derive(Debug, Clone)]
pub struct Lstm {
    prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        store.register_random(&format!("{name}.wx"), &[input, 4 * hidden], Init::Uniform(bound), rng)?;
        store.register_random(&format!("{name}.wh"), &[hidden, 4 * hidden], Init::Uniform(bound), rng)?;
        store.register_random(&format!("{name}.b"), &[4 * hidden], Init::Uniform(bound), rng)?;
        Ok(Lstm {
            prefix: name.to_string(),
            input,
            hidden,
        })
    }

    pub fn existing(store: &ParamStore, name: &str) -> Result<Self> {
        let wx = store
            .get(&format!("{name}.wx"))
            .ok_or_else(|| Error::Checkpoint(format!("missing lstm `{name}`")))?;
        Ok(Lstm {
            prefix: name.to_string(),
            input: wx.rows(),
            hidden: wx.cols() / 4,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore) -> LstmWeights<'t> {
        LstmWeights {
            wx: tape.param(store, &format!("{}.wx", self.prefix)),
            wh: tape.param(store, &format!("{}.wh", self.prefix)),
            b: tape.param(store, &format!("{}.b", self.prefix)),
        }
    }

    pub fn zero_state<'t>(&self, tape: &'t Tape) -> (Var<'t>, Var<'t>) {
        (
            tape.constant(Tensor::zeros(&[1, self.hidden])),
            tape.constant(Tensor::zeros(&[1, self.hidden])),
        )
    }

    /// Run over `seq: [L, in]`, returning one `[1, H]` output per position.
    /// With `reverse`, position `L-1` is consumed first; outputs stay
    /// indexed by position.
    pub fn run<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        seq: Var<'t>,
        reverse: bool,
    ) -> Result<Vec<Var<'t>>> {
        let len = seq.rows();
        if len == 0 {
            return Err(Error::EmptySequence("lstm input"));
        }
        if seq.cols() != self.input {
            return Err(Error::Shape(format!(
                "lstm `{}` expects {} inputs, got {:?}",
                self.prefix,
                self.input,
                seq.dims()
            )));
        }
        let w = self.bind(tape, store);
        let proj = seq.matmul(w.wx)?.add_row(w.b)?;
        let (mut h, mut c) = self.zero_state(tape);
        let mut outputs: Vec<Option<Var<'t>>> = vec![None; len];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..len).rev())
        } else {
            Box::new(0..len)
        };
        for t in order {
            let (h2, c2) = lstm_step(proj.row(t)?, h, c, w.wh)?;
            h = h2;
            c = c2;
            outputs[t] = Some(h);
        }
        Ok(outputs.into_iter().map(|o| o.expect("every step visited")).collect())
    }
}

#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(BiLstm {
            forward: Lstm::new(store, &format!("{name}.fwd"), input, hidden, rng)?,
            backward: Lstm::new(store, &format!("{name}.bwd"), input, hidden, rng)?,
        })
    }

    pub fn existing(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(BiLstm {
            forward: Lstm::existing(store, &format!("{name}.fwd"))?,
            backward: Lstm::existing(store, &format!("{name}.bwd"))?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    /// `[L, in] → [L, 2H]`: forward state ‖ backward state per position.
    pub fn encode<'t>(&self, tape: &'t Tape, store: &ParamStore, seq: Var<'t>) -> Result<Var<'t>> {
        bilstm_encode(tape, store, seq, self)
    }
}

pub fn bilstm_encode<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    seq: Var<'t>,
    layer: &BiLstm,
) -> Result<Var<'t>> {
    if seq.rows() == 0 {
        return Err(Error::EmptySequence("bilstm input"));
    }
    let fwd = layer.forward.run(tape, store, seq, false)?;
    let bwd = layer.backward.run(tape, store, seq, true)?;
    let f = tape.concat_rows(&fwd)?;
    let b = tape.concat_rows(&bwd)?;
    tape.concat_cols(&[f, b])
}

/// Concatenation of the first and last rows of a `[L, C]` sequence.
pub fn first_last<'t>(seq: Var<'t>) -> Result<Var<'t>> {
    let len = seq.rows();
    if len == 0 {
        return Err(Error::EmptySequence("first/last summary"));
    }
    let tape = seq.tape();
    tape.concat_cols(&[seq.row(0)?, seq.row(len - 1)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn const_mat<'t>(tape: &'t Tape, rows: usize, cols: usize, phase: f64) -> Var<'t> {
        let data = (0..rows * cols)
            .map(|i| ((i as f64 + 1.0) * phase).sin())
            .collect();
        tape.constant(Tensor::matrix(rows, cols, data).unwrap())
    }

    #[test]
    fn linear_identity_and_constant() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::row(&[1.0, 2.0]));
        let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zb = tape.constant(Tensor::row(&[0.0, 0.0]));
        assert_eq!(linear_forward(x, eye, Some(zb)).unwrap().value().data(), &[1.0, 2.0]);

        let x = tape.constant(Tensor::row(&[5.0, -7.0]));
        let zw = tape.constant(Tensor::zeros(&[2, 1]));
        let b = tape.constant(Tensor::row(&[3.0]));
        assert_eq!(linear_forward(x, zw, Some(b)).unwrap().value().data(), &[3.0]);
        assert!(linear_forward(x, tape.constant(Tensor::zeros(&[3, 1])), None).is_err());
    }

    #[test]
    fn embedding_rows_and_scatter() {
        let mut store = ParamStore::new();
        store
            .insert("t", Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let tape = Tape::new();
        let table = tape.param(&store, "t");
        let out = embedding_lookup(table, &[1, 0, 1]).unwrap().value();
        assert_eq!(out.data(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(embedding_lookup(table, &[]).unwrap().dims(), vec![0, 2]);
        assert!(matches!(embedding_lookup(table, &[3]), Err(Error::Index { index: 3, len: 3 })));

        let tape = Tape::new();
        let table = tape.param(&store, "t");
        let g = embedding_lookup(table, &[0, 0]).unwrap().sum().backward();
        assert_eq!(g.get(&store, "t").unwrap().data(), &[2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_lstm_cell_is_fixed_point() {
        let mut store = ParamStore::new();
        store.register("l.wx", &[3, 8], Init::Zeros).unwrap();
        store.register("l.wh", &[2, 8], Init::Zeros).unwrap();
        store.register("l.b", &[8], Init::Zeros).unwrap();
        let lstm = Lstm::existing(&store, "l").unwrap();
        let tape = Tape::new();
        let w = lstm.bind(&tape, &store);
        let (h, c) = lstm.zero_state(&tape);
        let x = tape.constant(Tensor::row(&[0.3, -0.2, 0.9]));
        let (h2, c2) = lstm_cell(x, h, c, &w).unwrap();
        assert_eq!(h2.value().data(), &[0.0, 0.0]);
        assert_eq!(c2.value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn lstm_cell_is_deterministic_and_checks_shapes() {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "l", 3, 2, &mut rng()).unwrap();
        let run = || {
            let tape = Tape::new();
            let w = lstm.bind(&tape, &store);
            let (h, c) = lstm.zero_state(&tape);
            let x = const_mat(&tape, 1, 3, 0.4);
            let (h2, c2) = lstm_cell(x, h, c, &w).unwrap();
            (h2.value(), c2.value())
        };
        assert_eq!(run(), run());
        let tape = Tape::new();
        let w = lstm.bind(&tape, &store);
        let h = tape.constant(Tensor::zeros(&[1, 3]));
        let x = const_mat(&tape, 1, 3, 0.4);
        assert!(lstm_cell(x, h, h, &w).is_err());
    }

    #[test]
    fn lstm_cell_gradients() {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "l", 3, 2, &mut rng()).unwrap();
        let err = grad_check(&mut store, 1e-5, |tape, store| {
            let w = lstm.bind(tape, store);
            let x = const_mat(tape, 1, 3, 0.7);
            let h = const_mat(tape, 1, 2, 1.3);
            let c = const_mat(tape, 1, 2, 2.1);
            let (h2, c2) = lstm_cell(x, h, c, &w)?;
            Ok(h2.mul(const_mat(tape, 1, 2, 0.5))?.add(c2.square())?.sum())
        })
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn bilstm_single_step_and_empty() {
        let mut store = ParamStore::new();
        let bi = BiLstm::new(&mut store, "bi", 2, 3, &mut rng()).unwrap();
        let tape = Tape::new();
        let x = const_mat(&tape, 1, 2, 0.9);
        let out = bi.encode(&tape, &store, x).unwrap().value();
        assert_eq!(out.dims(), &[1, 6]);

        let single = |l: &Lstm| {
            let w = l.bind(&tape, &store);
            let (h, c) = l.zero_state(&tape);
            lstm_cell(x, h, c, &w).unwrap().0.value()
        };
        let mut want = single(&bi.forward).into_data();
        want.extend(single(&bi.backward).into_data());
        assert_eq!(out.data(), want.as_slice());

        let empty = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(bi.encode(&tape, &store, empty), Err(Error::EmptySequence(_))));
    }

    #[test]
    fn bilstm_reversal_symmetry() {
        let mut store = ParamStore::new();
        let bi = BiLstm::new(&mut store, "bi", 2, 3, &mut rng()).unwrap();
        let swapped = BiLstm {
            forward: bi.backward.clone(),
            backward: bi.forward.clone(),
        };
        let tape = Tape::new();
        let x = const_mat(&tape, 4, 2, 0.6);
        let rev = x.gather_rows(&[3, 2, 1, 0]).unwrap();
        let a = bi.encode(&tape, &store, x).unwrap().value();
        let b = swapped.encode(&tape, &store, rev).unwrap().value();
        for t in 0..4 {
            let ra = a.row_slice(t);
            let rb = b.row_slice(3 - t);
            assert_eq!(&ra[..3], &rb[3..]);
            assert_eq!(&ra[3..], &rb[..3]);
        }
    }

    #[test]
    fn bilstm_gradients() {
        let mut store = ParamStore::new();
        let bi = BiLstm::new(&mut store, "bi", 2, 2, &mut rng()).unwrap();
        let err = grad_check(&mut store, 1e-5, |tape, store| {
            let x = const_mat(tape, 3, 2, 0.8);
            let out = bi.encode(tape, store, x)?;
            Ok(out.mul(const_mat(tape, 3, 4, 0.3))?.sum())
        })
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn first_last_duplicates_single_row() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::row(&[1.0, 2.0]));
        assert_eq!(first_last(x).unwrap().value().data(), &[1.0, 2.0, 1.0, 2.0]);
    }
}
