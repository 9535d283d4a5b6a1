//! Two-tower autoencoder model with multi-input decoders and a contrastive
//! auxiliary objective over two string views of each drug.
//!
//! Each tower encodes an association row into a latent factor
//!
//! ```text
//! d = σ(W2ᵀ σ(W1ᵀ x + b1) + b2)
//! ```
//!
//! and reconstructs the row with a decoder that re-injects `β·d` before the
//! second and third layers:
//!
//! ```text
//! x̂ = σ(V3ᵀ (σ(V2ᵀ (σ(V1ᵀ d + b3) + β d) + b4) + β d) + b5)
//! ```
//!
//! The drug tower is fed association rows, the disease tower association
//! columns. A drug–disease pair is scored as `σ(dᵀs)`.
//!
//! For the auxiliary task, the SMILES and InChI view vectors are mapped into
//! the drug tower's input space by two affine adapters and encoded with the
//! *same* drug encoder; the resulting latents are L2-normalized and
//! contrasted against the views of the least similar drug.
//!
//! Gradients are computed by hand. Per batch, every distinct drug and
//! disease is run forward once, its upstream gradient accumulated over all
//! pairs it appears in, and then back-propagated once.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::AssociationMatrix;
use crate::error::{Error, Result};
use crate::featurize::ViewVectors;
use crate::numerics::{dot, l2_norm, logistic, squared_distance, Matrix};

/// Probability clamp applied before the logs of the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

/// One autoencoder tower. Weights are `in × out`; biases are `1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub v1: Matrix,
    pub b3: Matrix,
    pub v2: Matrix,
    pub b4: Matrix,
    pub v3: Matrix,
    pub b5: Matrix,
}

pub const TOWER_TENSORS: [&str; 10] = ["w1", "b1", "w2", "b2", "v1", "b3", "v2", "b4", "v3", "b5"];

impl TowerParams {
    pub fn zeros(input_dim: usize, hidden: usize, k: usize) -> Self {
        Self {
            w1: Matrix::zeros(input_dim, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, k),
            b2: Matrix::zeros(1, k),
            v1: Matrix::zeros(k, k),
            b3: Matrix::zeros(1, k),
            v2: Matrix::zeros(k, k),
            b4: Matrix::zeros(1, k),
            v3: Matrix::zeros(k, input_dim),
            b5: Matrix::zeros(1, input_dim),
        }
    }

    /// Uniform `±1/√fan_in` initialization, except that the encoder output
    /// bias starts at [`initial_latent_bias`].
    pub fn init(input_dim: usize, hidden: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut b2 = Matrix::zeros(1, k);
        b2.fill(initial_latent_bias(k));
        Self {
            w1: Matrix::uniform_init(input_dim, hidden, input_dim, rng),
            b1: Matrix::uniform_init(1, hidden, input_dim, rng),
            w2: Matrix::uniform_init(hidden, k, hidden, rng),
            b2,
            v1: Matrix::uniform_init(k, k, k, rng),
            b3: Matrix::uniform_init(1, k, k, rng),
            v2: Matrix::uniform_init(k, k, k, rng),
            b4: Matrix::uniform_init(1, k, k, rng),
            v3: Matrix::uniform_init(k, input_dim, k, rng),
            b5: Matrix::uniform_init(1, input_dim, k, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden(), self.k())
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn k(&self) -> usize {
        self.w2.cols()
    }

    pub fn tensors(&self) -> [&Matrix; 10] {
        [
            &self.w1, &self.b1, &self.w2, &self.b2, &self.v1, &self.b3, &self.v2, &self.b4, &self.v3, &self.b5,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 10] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.v1,
            &mut self.b3,
            &mut self.v2,
            &mut self.b4,
            &mut self.v3,
            &mut self.b5,
        ]
    }
}

/// Starting value of the encoder output bias: `logit(min(1/√k, ½))`.
///
/// Latents then start near `1/√k`, so the initial inner product of two
/// latents is about 1. With sigmoid latents centred at ½ it would be about
/// `k/4`, which saturates the logistic prediction for larger `k`: positives
/// get no gradient and the negatives drive every latent towards 0, where
/// the gradients of the inner product vanish.
pub fn initial_latent_bias(k: usize) -> f64 {
    let mu = (1.0 / (k.max(1) as f64).sqrt()).min(0.5);
    (mu / (1.0 - mu)).ln()
}

/// Affine maps from view-vector space into the drug encoder's input space.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewAdapters {
    pub a_g: Matrix,
    pub c_g: Matrix,
    pub a_h: Matrix,
    pub c_h: Matrix,
}

pub const ADAPTER_TENSORS: [&str; 4] = ["a_g", "c_g", "a_h", "c_h"];

impl ViewAdapters {
    pub fn zeros(feat_dim: usize, out_dim: usize) -> Self {
        Self {
            a_g: Matrix::zeros(feat_dim, out_dim),
            c_g: Matrix::zeros(1, out_dim),
            a_h: Matrix::zeros(feat_dim, out_dim),
            c_h: Matrix::zeros(1, out_dim),
        }
    }

    pub fn init(feat_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a_g: Matrix::uniform_init(feat_dim, out_dim, feat_dim, rng),
            c_g: Matrix::uniform_init(1, out_dim, feat_dim, rng),
            a_h: Matrix::uniform_init(feat_dim, out_dim, feat_dim, rng),
            c_h: Matrix::uniform_init(1, out_dim, feat_dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.a_g.rows(), self.a_g.cols())
    }

    pub fn feat_dim(&self) -> usize {
        self.a_g.rows()
    }

    pub fn tensors(&self) -> [&Matrix; 4] {
        [&self.a_g, &self.c_g, &self.a_h, &self.c_h]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.a_g, &mut self.c_g, &mut self.a_h, &mut self.c_h]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// Latent dimension.
    pub k: usize,
    /// Encoder hidden width.
    pub hidden: usize,
    /// Weight of the auxiliary loss.
    pub alpha: f64,
    /// Weight of the latent skip input in the decoders.
    pub beta: f64,
    /// Weight of the reconstruction terms.
    pub lambda: f64,
    /// L2-normalize auxiliary latents before the contrastive loss.
    pub normalize_aux: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            k: 64,
            hidden: 128,
            alpha: 0.5,
            beta: 0.5,
            lambda: 0.5,
            normalize_aux: true,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.hidden < 1 {
            return Err(Error::Config("latent and hidden dims must be ≥ 1".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// All trainable weights plus the hyperparameters they were built with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub drug: TowerParams,
    pub disease: TowerParams,
    pub adapters: Option<ViewAdapters>,
    pub hyper: Hyper,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl ModelParams {
    /// Seeded initialization. Towers and adapters draw from separate RNG
    /// streams, so enabling the auxiliary task leaves tower weights unchanged.
    pub fn init(
        num_drugs: usize,
        num_diseases: usize,
        feat_dim: Option<usize>,
        hyper: Hyper,
        seed: u64,
    ) -> Result<Self> {
        hyper.validate()?;
        let mut rng = stream_rng(seed, 1);
        let drug = TowerParams::init(num_diseases, hyper.hidden, hyper.k, &mut rng);
        let disease = TowerParams::init(num_drugs, hyper.hidden, hyper.k, &mut rng);
        let adapters = feat_dim.map(|f| ViewAdapters::init(f, num_diseases, &mut stream_rng(seed, 2)));
        Ok(Self {
            drug,
            disease,
            adapters,
            hyper,
        })
    }

    pub fn zeros_like(&self) -> ParamGrads {
        ParamGrads {
            drug: self.drug.zeros_like(),
            disease: self.disease.zeros_like(),
            adapters: self.adapters.as_ref().map(ViewAdapters::zeros_like),
        }
    }

    pub fn num_drugs(&self) -> usize {
        self.disease.input_dim()
    }

    pub fn num_diseases(&self) -> usize {
        self.drug.input_dim()
    }

    /// Named tensors in a fixed order: drug tower, disease tower, adapters.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = Vec::with_capacity(24);
        for (tower, t) in [("drug", &self.drug), ("disease", &self.disease)] {
            for (name, m) in TOWER_TENSORS.iter().zip(t.tensors()) {
                out.push((format!("{tower}.{name}"), m));
            }
        }
        if let Some(a) = &self.adapters {
            for (name, m) in ADAPTER_TENSORS.iter().zip(a.tensors()) {
                out.push((format!("adapter.{name}"), m));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::with_capacity(24);
        out.extend(self.drug.tensors_mut());
        out.extend(self.disease.tensors_mut());
        if let Some(a) = &mut self.adapters {
            out.extend(a.tensors_mut());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, m)| m.values().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for m in self.tensors_mut() {
            let n = m.len();
            m.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, m)| m.is_finite())
    }
}

/// Gradient accumulator with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub drug: TowerParams,
    pub disease: TowerParams,
    pub adapters: Option<ViewAdapters>,
}

impl ParamGrads {
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = Vec::with_capacity(24);
        out.extend(self.drug.tensors());
        out.extend(self.disease.tensors());
        if let Some(a) = &self.adapters {
            out.extend(a.tensors());
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|m| m.values().iter().copied()).collect()
    }
}

/// Association rows for the drug tower and columns for the disease tower.
#[derive(Debug, Clone)]
pub struct TowerInputs {
    pub drug_rows: Matrix,
    pub disease_rows: Matrix,
}

impl TowerInputs {
    pub fn new(r: &AssociationMatrix) -> Self {
        Self {
            drug_rows: r.as_matrix().clone(),
            disease_rows: r.as_matrix().transpose(),
        }
    }
}

fn check_len(op: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dimension {
            op,
            left: (got, 1),
            right: (want, 1),
        });
    }
    Ok(())
}

/// `σ(Wᵀx + b)`
fn dense_sigmoid(w: &Matrix, b: &Matrix, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    w.t_matvec(x, &mut out);
    for (o, bias) in out.iter_mut().zip(b.values()) {
        *o = logistic(*o + bias);
    }
    out
}

struct EncodeTrace {
    hidden: Vec<f64>,
    latent: Vec<f64>,
}

fn encode_trace(t: &TowerParams, x: &[f64]) -> EncodeTrace {
    let hidden = dense_sigmoid(&t.w1, &t.b1, x);
    let latent = dense_sigmoid(&t.w2, &t.b2, &hidden);
    EncodeTrace { hidden, latent }
}

/// Latent factor of one input row.
pub fn encode(tower: &TowerParams, x: &[f64]) -> Result<Vec<f64>> {
    check_len("encode", x.len(), tower.input_dim())?;
    Ok(encode_trace(tower, x).latent)
}

struct DecodeTrace {
    a1: Vec<f64>,
    in2: Vec<f64>,
    a2: Vec<f64>,
    in3: Vec<f64>,
    out: Vec<f64>,
}

fn decode_trace(t: &TowerParams, d: &[f64], beta: f64) -> DecodeTrace {
    let a1 = dense_sigmoid(&t.v1, &t.b3, d);
    let in2: Vec<f64> = a1.iter().zip(d).map(|(a, z)| a + beta * z).collect();
    let a2 = dense_sigmoid(&t.v2, &t.b4, &in2);
    let in3: Vec<f64> = a2.iter().zip(d).map(|(a, z)| a + beta * z).collect();
    let out = dense_sigmoid(&t.v3, &t.b5, &in3);
    DecodeTrace { a1, in2, a2, in3, out }
}

/// Multi-input decoder: the latent is added, scaled by `beta`, to the input
/// of the second and third decoder layers.
pub fn decode_multi(tower: &TowerParams, d: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_len("decode", d.len(), tower.k())?;
    Ok(decode_trace(tower, d, beta).out)
}

/// Plain three-layer decoder with no skip inputs.
pub fn decode_plain(tower: &TowerParams, d: &[f64]) -> Result<Vec<f64>> {
    check_len("decode", d.len(), tower.k())?;
    let a1 = dense_sigmoid(&tower.v1, &tower.b3, d);
    let a2 = dense_sigmoid(&tower.v2, &tower.b4, &a1);
    Ok(dense_sigmoid(&tower.v3, &tower.b5, &a2))
}

/// `σ(dᵀs)`
pub fn predict(d: &[f64], s: &[f64]) -> Result<f64> {
    check_len("predict", s.len(), d.len())?;
    Ok(logistic(dot(d, s)))
}

/// Least similar other drug; ties go to the smallest index.
pub fn select_negative(i: usize, drug_sim: &Matrix) -> Result<usize> {
    let n = drug_sim.rows();
    if n < 2 {
        return Err(Error::Config("negative selection needs at least two drugs".into()));
    }
    if i >= n {
        return Err(Error::Index { index: i, len: n });
    }
    let row = drug_sim.row(i);
    let mut best = if i == 0 { 1 } else { 0 };
    for (j, &v) in row.iter().enumerate() {
        if j != i && v < row[best] {
            best = j;
        }
    }
    Ok(best)
}

pub fn select_all_negatives(drug_sim: &Matrix) -> Result<Vec<usize>> {
    (0..drug_sim.rows()).map(|i| select_negative(i, drug_sim)).collect()
}

/// `‖r̂ − r‖²`
pub fn loss_reconstruction(reconstruction: &[f64], target: &[f64]) -> Result<f64> {
    check_len("reconstruction", reconstruction.len(), target.len())?;
    Ok(squared_distance(reconstruction, target))
}

/// `D(zᵢ, zᵢ′) − D(zᵢ, zₖ) − D(zᵢ, zₖ′)` with squared Euclidean `D`.
pub fn loss_auxiliary(z_i: &[f64], z_i2: &[f64], z_k: &[f64], z_k2: &[f64]) -> f64 {
    squared_distance(z_i, z_i2) - squared_distance(z_i, z_k) - squared_distance(z_i, z_k2)
}

/// The four auxiliary latents of a target drug and its negative.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxLatents {
    pub z_i: Vec<f64>,
    pub z_i2: Vec<f64>,
    pub z_k: Vec<f64>,
    pub z_k2: Vec<f64>,
}

#[derive(Clone, Copy)]
enum View {
    Smiles,
    Inchi,
}

fn adapter_input(adapters: &ViewAdapters, views: &ViewVectors, drug: usize, view: View) -> Vec<f64> {
    let (a, c, x) = match view {
        View::Smiles => (&adapters.a_g, &adapters.c_g, views.smiles.row(drug)),
        View::Inchi => (&adapters.a_h, &adapters.c_h, views.inchi.row(drug)),
    };
    let mut u = vec![0.0; a.cols()];
    a.t_matvec(x, &mut u);
    for (o, b) in u.iter_mut().zip(c.values()) {
        *o += b;
    }
    u
}

struct AuxTrace {
    input: Vec<f64>,
    enc: EncodeTrace,
    norm: f64,
    z: Vec<f64>,
}

fn aux_trace(params: &ModelParams, adapters: &ViewAdapters, views: &ViewVectors, drug: usize, view: View) -> AuxTrace {
    let input = adapter_input(adapters, views, drug, view);
    let enc = encode_trace(&params.drug, &input);
    let (norm, z) = if params.hyper.normalize_aux {
        let n = l2_norm(&enc.latent);
        (n, enc.latent.iter().map(|v| v / n).collect())
    } else {
        (1.0, enc.latent.clone())
    };
    AuxTrace { input, enc, norm, z }
}

fn check_views(params: &ModelParams, views: &ViewVectors, drugs: &[usize]) -> Result<()> {
    let adapters = params
        .adapters
        .as_ref()
        .ok_or_else(|| Error::Input("auxiliary task requires view adapters".into()))?;
    if views.dim() != adapters.feat_dim() || views.inchi.shape() != views.smiles.shape() {
        return Err(Error::Dimension {
            op: "view vectors",
            left: views.smiles.shape(),
            right: (views.smiles.rows(), adapters.feat_dim()),
        });
    }
    for &d in drugs {
        if d >= views.num_drugs() {
            return Err(Error::Input(format!("no view vectors for drug {d}")));
        }
    }
    Ok(())
}

/// `zᵢ, zᵢ′` from drug `i`'s two views and `zₖ, zₖ′` from drug `k`'s, all
/// through the shared drug encoder.
pub fn aux_latents(params: &ModelParams, views: &ViewVectors, i: usize, k: usize) -> Result<AuxLatents> {
    check_views(params, views, &[i, k])?;
    let adapters = params.adapters.as_ref().expect("checked");
    Ok(AuxLatents {
        z_i: aux_trace(params, adapters, views, i, View::Smiles).z,
        z_i2: aux_trace(params, adapters, views, i, View::Inchi).z,
        z_k: aux_trace(params, adapters, views, k, View::Smiles).z,
        z_k2: aux_trace(params, adapters, views, k, View::Inchi).z,
    })
}

/// Accumulates into `grads` the encoder gradient for upstream `grad_latent`;
/// returns the gradient w.r.t. the input when `want_input` is set.
fn encoder_backward(
    t: &TowerParams,
    g: &mut TowerParams,
    x: &[f64],
    trace: &EncodeTrace,
    grad_latent: &[f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let g2: Vec<f64> = grad_latent
        .iter()
        .zip(&trace.latent)
        .map(|(gl, d)| gl * d * (1.0 - d))
        .collect();
    g.w2.add_outer(&trace.hidden, &g2);
    add_to(g.b2.values_mut(), &g2);
    let mut grad_hidden = vec![0.0; t.hidden()];
    t.w2.matvec(&g2, &mut grad_hidden);
    let g1: Vec<f64> = grad_hidden
        .iter()
        .zip(&trace.hidden)
        .map(|(gh, h)| gh * h * (1.0 - h))
        .collect();
    g.w1.add_outer(x, &g1);
    add_to(g.b1.values_mut(), &g1);
    want_input.then(|| {
        let mut gx = vec![0.0; t.input_dim()];
        t.w1.matvec(&g1, &mut gx);
        gx
    })
}

/// Accumulates decoder gradients; returns the gradient w.r.t. the latent
/// reaching it through `V1` and both skip inputs.
fn decoder_backward(
    t: &TowerParams,
    g: &mut TowerParams,
    d: &[f64],
    trace: &DecodeTrace,
    beta: f64,
    grad_out: &[f64],
) -> Vec<f64> {
    let k = t.k();
    let g3: Vec<f64> = grad_out.iter().zip(&trace.out).map(|(go, r)| go * r * (1.0 - r)).collect();
    g.v3.add_outer(&trace.in3, &g3);
    add_to(g.b5.values_mut(), &g3);
    let mut grad_in3 = vec![0.0; k];
    t.v3.matvec(&g3, &mut grad_in3);

    let g2: Vec<f64> = grad_in3.iter().zip(&trace.a2).map(|(gi, a)| gi * a * (1.0 - a)).collect();
    g.v2.add_outer(&trace.in2, &g2);
    add_to(g.b4.values_mut(), &g2);
    let mut grad_in2 = vec![0.0; k];
    t.v2.matvec(&g2, &mut grad_in2);

    let g1: Vec<f64> = grad_in2.iter().zip(&trace.a1).map(|(gi, a)| gi * a * (1.0 - a)).collect();
    g.v1.add_outer(d, &g1);
    add_to(g.b3.values_mut(), &g1);
    let mut grad_d = vec![0.0; k];
    t.v1.matvec(&g1, &mut grad_d);
    for ((gd, a), b) in grad_d.iter_mut().zip(&grad_in3).zip(&grad_in2) {
        *gd += beta * (a + b);
    }
    grad_d
}

fn add_to(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Inputs of the contrastive term: view vectors and each drug's negative.
#[derive(Debug, Clone, Copy)]
pub struct AuxContext<'a> {
    pub views: &'a ViewVectors,
    pub negatives: &'a [usize],
}

/// Loss of one batch, split into its parts.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    /// `main + alpha * aux`
    pub total: f64,
    /// Mean over pairs of cross-entropy plus weighted reconstruction.
    pub main: f64,
    /// Mean cross-entropy alone.
    pub bce: f64,
    /// Mean weighted reconstruction (both towers).
    pub reconstruction: f64,
    /// Mean contrastive loss over the batch's distinct drugs (unweighted).
    pub aux: f64,
}

fn bce(p_raw: f64, label: u8) -> (f64, bool) {
    let clamped = !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p_raw);
    let p = p_raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let loss = if label == 1 { -p.ln() } else { -(1.0 - p).ln() };
    (loss, clamped)
}

fn validate_batch(batch: &[(usize, usize, u8)], params: &ModelParams, inputs: &TowerInputs) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let (n, m) = (params.num_drugs(), params.num_diseases());
    if inputs.drug_rows.shape() != (n, m) || inputs.disease_rows.shape() != (m, n) {
        return Err(Error::Dimension {
            op: "tower inputs",
            left: inputs.drug_rows.shape(),
            right: (n, m),
        });
    }
    for &(i, j, label) in batch {
        if i >= n || j >= m {
            return Err(Error::Input(format!("pair ({i}, {j}) outside {n}×{m}")));
        }
        if label > 1 {
            return Err(Error::Input(format!("label {label} is not 0/1")));
        }
    }
    Ok(())
}

struct Slots {
    index: Vec<Option<usize>>,
    members: Vec<usize>,
}

impl Slots {
    fn new(n: usize) -> Self {
        Self {
            index: vec![None; n],
            members: Vec::new(),
        }
    }

    fn slot(&mut self, id: usize) -> usize {
        *self.index[id].get_or_insert_with(|| {
            self.members.push(id);
            self.members.len() - 1
        })
    }
}

struct EntityState {
    enc: EncodeTrace,
    dec: Option<DecodeTrace>,
    grad_latent: Vec<f64>,
    recon_weight: f64,
}

/// Loss of a batch and, when `grads` is given, its gradient accumulated
/// into `grads`. `aux` of `None` (or `alpha == 0`) skips the auxiliary term.
pub fn loss_and_grad(
    batch: &[(usize, usize, u8)],
    params: &ModelParams,
    inputs: &TowerInputs,
    aux: Option<AuxContext<'_>>,
    mut grads: Option<&mut ParamGrads>,
) -> Result<LossBreakdown> {
    validate_batch(batch, params, inputs)?;
    let hyper = &params.hyper;
    let inv_b = 1.0 / batch.len() as f64;
    let need_recon = hyper.lambda != 0.0;

    let mut drug_slots = Slots::new(params.num_drugs());
    let mut disease_slots = Slots::new(params.num_diseases());
    let mut drugs: Vec<EntityState> = Vec::new();
    let mut diseases: Vec<EntityState> = Vec::new();
    let mut pair_slots = Vec::with_capacity(batch.len());

    let forward = |tower: &TowerParams, x: &[f64]| {
        let enc = encode_trace(tower, x);
        let dec = need_recon.then(|| decode_trace(tower, &enc.latent, hyper.beta));
        EntityState {
            grad_latent: vec![0.0; tower.k()],
            enc,
            dec,
            recon_weight: 0.0,
        }
    };

    for &(i, j, _) in batch {
        let di = drug_slots.slot(i);
        if di == drugs.len() {
            drugs.push(forward(&params.drug, inputs.drug_rows.row(i)));
        }
        let sj = disease_slots.slot(j);
        if sj == diseases.len() {
            diseases.push(forward(&params.disease, inputs.disease_rows.row(j)));
        }
        drugs[di].recon_weight += hyper.lambda * inv_b;
        diseases[sj].recon_weight += hyper.lambda * inv_b;
        pair_slots.push((di, sj));
    }

    let mut bce_sum = 0.0;
    for (&(_, _, label), &(di, sj)) in batch.iter().zip(&pair_slots) {
        let p = logistic(dot(&drugs[di].enc.latent, &diseases[sj].enc.latent));
        let (loss, clamped) = bce(p, label);
        bce_sum += loss;
        if grads.is_some() && !clamped {
            let g = (p - label as f64) * inv_b;
            let (d_lat, s_lat) = (drugs[di].enc.latent.clone(), diseases[sj].enc.latent.clone());
            for (gd, s) in drugs[di].grad_latent.iter_mut().zip(&s_lat) {
                *gd += g * s;
            }
            for (gs, d) in diseases[sj].grad_latent.iter_mut().zip(&d_lat) {
                *gs += g * d;
            }
        }
    }

    let mut recon_sum = backprop_tower(
        &mut drugs,
        &drug_slots.members,
        &inputs.drug_rows,
        &params.drug,
        hyper.beta,
        grads.as_deref_mut().map(|g| &mut g.drug),
    );
    recon_sum += backprop_tower(
        &mut diseases,
        &disease_slots.members,
        &inputs.disease_rows,
        &params.disease,
        hyper.beta,
        grads.as_deref_mut().map(|g| &mut g.disease),
    );

    let bce_mean = bce_sum * inv_b;
    let main = bce_mean + recon_sum;
    let mut out = LossBreakdown {
        total: main,
        main,
        bce: bce_mean,
        reconstruction: recon_sum,
        aux: 0.0,
    };

    if let Some(ctx) = aux.filter(|_| hyper.alpha != 0.0) {
        let mut targets = drug_slots.members.clone();
        targets.sort_unstable();
        let aux_mean = auxiliary_term(params, ctx, &targets, hyper.alpha, grads)?;
        out.aux = aux_mean;
        out.total = main + hyper.alpha * aux_mean;
    }
    Ok(out)
}

/// Adds the weighted reconstruction gradient, back-propagates every
/// entity's latent gradient through the encoder, and returns the weighted
/// reconstruction loss.
fn backprop_tower(
    states: &mut [EntityState],
    members: &[usize],
    rows: &Matrix,
    tower: &TowerParams,
    beta: f64,
    mut grads: Option<&mut TowerParams>,
) -> f64 {
    let mut recon = 0.0;
    for (state, &id) in states.iter_mut().zip(members) {
        let x = rows.row(id);
        if let Some(dec) = &state.dec {
            recon += state.recon_weight * squared_distance(&dec.out, x);
            if let Some(g) = grads.as_deref_mut() {
                let grad_out: Vec<f64> = dec
                    .out
                    .iter()
                    .zip(x)
                    .map(|(r, t)| 2.0 * state.recon_weight * (r - t))
                    .collect();
                let gd = decoder_backward(tower, g, &state.enc.latent, dec, beta, &grad_out);
                add_to(&mut state.grad_latent, &gd);
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            encoder_backward(tower, g, x, &state.enc, &state.grad_latent, false);
        }
    }
    recon
}

/// Mean contrastive loss over `targets`; accumulates `alpha`-weighted
/// gradients when `grads` is given.
fn auxiliary_term(
    params: &ModelParams,
    ctx: AuxContext<'_>,
    targets: &[usize],
    alpha: f64,
    mut grads: Option<&mut ParamGrads>,
) -> Result<f64> {
    check_views(params, ctx.views, targets)?;
    if ctx.negatives.len() < ctx.views.num_drugs() {
        return Err(Error::Input("negative table shorter than drug count".into()));
    }
    let adapters = params.adapters.as_ref().expect("checked");
    let scale = alpha / targets.len() as f64;
    let mut total = 0.0;
    for &i in targets {
        let k = ctx.negatives[i];
        let traces = [
            (i, View::Smiles, aux_trace(params, adapters, ctx.views, i, View::Smiles)),
            (i, View::Inchi, aux_trace(params, adapters, ctx.views, i, View::Inchi)),
            (k, View::Smiles, aux_trace(params, adapters, ctx.views, k, View::Smiles)),
            (k, View::Inchi, aux_trace(params, adapters, ctx.views, k, View::Inchi)),
        ];
        let [zi, zi2, zk, zk2] = [&traces[0].2.z, &traces[1].2.z, &traces[2].2.z, &traces[3].2.z];
        total += loss_auxiliary(zi, zi2, zk, zk2);

        let Some(g) = grads.as_deref_mut() else { continue };
        let dim = zi.len();
        let mut gz = [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]];
        for d in 0..dim {
            let (a, b, c, e) = (zi[d], zi2[d], zk[d], zk2[d]);
            gz[0][d] = scale * 2.0 * ((a - b) - (a - c) - (a - e));
            gz[1][d] = scale * -2.0 * (a - b);
            gz[2][d] = scale * 2.0 * (a - c);
            gz[3][d] = scale * 2.0 * (a - e);
        }
        for ((drug, view, trace), gzv) in traces.iter().zip(gz) {
            let grad_latent = if params.hyper.normalize_aux {
                let proj = dot(&trace.z, &gzv);
                gzv.iter()
                    .zip(&trace.z)
                    .map(|(gv, z)| (gv - z * proj) / trace.norm)
                    .collect()
            } else {
                gzv
            };
            let gu = encoder_backward(&params.drug, &mut g.drug, &trace.input, &trace.enc, &grad_latent, true)
                .expect("input gradient requested");
            let ga = g.adapters.as_mut().expect("adapter grads present with adapters");
            let (a, c, x) = match view {
                View::Smiles => (&mut ga.a_g, &mut ga.c_g, ctx.views.smiles.row(*drug)),
                View::Inchi => (&mut ga.a_h, &mut ga.c_h, ctx.views.inchi.row(*drug)),
            };
            a.add_outer(x, &gu);
            add_to(c.values_mut(), &gu);
        }
    }
    Ok(total / targets.len() as f64)
}

/// Mean over the batch of cross-entropy plus `λ`-weighted reconstruction of
/// the drug row and disease column.
pub fn loss_main(batch: &[(usize, usize, u8)], params: &ModelParams, inputs: &TowerInputs) -> Result<f64> {
    Ok(loss_and_grad(batch, params, inputs, None, None)?.main)
}

/// `loss_main + alpha · mean auxiliary loss`.
pub fn loss_total(
    batch: &[(usize, usize, u8)],
    params: &ModelParams,
    inputs: &TowerInputs,
    aux: Option<AuxContext<'_>>,
) -> Result<f64> {
    Ok(loss_and_grad(batch, params, inputs, aux, None)?.total)
}

/// Latent factors of every drug and disease under `inputs`.
#[derive(Debug, Clone)]
pub struct Latents {
    pub drugs: Matrix,
    pub diseases: Matrix,
}

impl Latents {
    pub fn compute(params: &ModelParams, inputs: &TowerInputs) -> Self {
        let encode_all = |tower: &TowerParams, rows: &Matrix| {
            let mut out = Matrix::zeros(rows.rows(), tower.k());
            for r in 0..rows.rows() {
                let z = encode_trace(tower, rows.row(r)).latent;
                out.values_mut()[r * tower.k()..(r + 1) * tower.k()].copy_from_slice(&z);
            }
            out
        };
        Self {
            drugs: encode_all(&params.drug, &inputs.drug_rows),
            diseases: encode_all(&params.disease, &inputs.disease_rows),
        }
    }

    pub fn score(&self, drug: usize, disease: usize) -> f64 {
        logistic(dot(self.drugs.row(drug), self.diseases.row(disease)))
    }
}

/// Unweighted reconstruction error of the whole matrix: mean over drug rows
/// plus mean over disease columns.
pub fn reconstruction_error(params: &ModelParams, inputs: &TowerInputs) -> f64 {
    let tower_err = |tower: &TowerParams, rows: &Matrix| {
        let total: f64 = (0..rows.rows())
            .map(|r| {
                let x = rows.row(r);
                let d = encode_trace(tower, x).latent;
                squared_distance(&decode_trace(tower, &d, params.hyper.beta).out, x)
            })
            .sum();
        total / rows.rows() as f64
    };
    tower_err(&params.drug, &inputs.drug_rows) + tower_err(&params.disease, &inputs.disease_rows)
}

const CHECKPOINT_MAGIC: &str = "ssldr-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Model weights plus the seed they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub seed: u64,
}

impl Checkpoint {
    /// Text dump; floats use shortest round-trip formatting so a reload is
    /// bit-identical.
    pub fn to_text(&self) -> String {
        let h = &self.params.hyper;
        let mut out = format!("{CHECKPOINT_MAGIC}\t{CHECKPOINT_VERSION}\n");
        let _ = writeln!(out, "seed\t{}", self.seed);
        let _ = writeln!(out, "k\t{}", h.k);
        let _ = writeln!(out, "hidden\t{}", h.hidden);
        let _ = writeln!(out, "alpha\t{:e}", h.alpha);
        let _ = writeln!(out, "beta\t{:e}", h.beta);
        let _ = writeln!(out, "lambda\t{:e}", h.lambda);
        let _ = writeln!(out, "normalize_aux\t{}", h.normalize_aux);
        for (name, m) in self.params.named_tensors() {
            let _ = writeln!(out, "tensor\t{name}\t{}\t{}", m.rows(), m.cols());
            let vals: Vec<String> = m.values().iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&vals.join("\t"));
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != format!("{CHECKPOINT_MAGIC}\t{CHECKPOINT_VERSION}") {
            return Err(bad(format!("unrecognized header `{header}`")));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{key}`")))?;
            match line.split_once('\t') {
                Some((k, v)) if k == key => Ok(v.to_string()),
                _ => Err(bad(format!("expected `{key}`, found `{line}`"))),
            }
        };
        let num = |s: String, key: &str| -> Result<f64> { s.parse().map_err(|_| bad(format!("bad {key} `{s}`"))) };
        let int = |s: String, key: &str| -> Result<u64> { s.parse().map_err(|_| bad(format!("bad {key} `{s}`"))) };
        let seed = int(field("seed")?, "seed")?;
        let k = int(field("k")?, "k")? as usize;
        let hidden = int(field("hidden")?, "hidden")? as usize;
        let alpha = num(field("alpha")?, "alpha")?;
        let beta = num(field("beta")?, "beta")?;
        let lambda = num(field("lambda")?, "lambda")?;
        let normalize_aux = field("normalize_aux")?
            .parse()
            .map_err(|_| bad("bad normalize_aux".into()))?;

        let mut tensors: Vec<(String, Matrix)> = Vec::new();
        loop {
            let line = lines.next().ok_or_else(|| bad("missing `end`".into()))?;
            if line == "end" {
                break;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 || parts[0] != "tensor" {
                return Err(bad(format!("expected tensor header, found `{line}`")));
            }
            let rows: usize = parts[2].parse().map_err(|_| bad(format!("bad rows in `{line}`")))?;
            let cols: usize = parts[3].parse().map_err(|_| bad(format!("bad cols in `{line}`")))?;
            let data = lines.next().ok_or_else(|| bad(format!("missing values for {}", parts[1])))?;
            let values = data
                .split('\t')
                .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad value `{v}` in {}", parts[1]))))
                .collect::<Result<Vec<_>>>()?;
            tensors.push((parts[1].to_string(), Matrix::from_vec(rows, cols, values)?));
        }

        let hyper = Hyper {
            k,
            hidden,
            alpha,
            beta,
            lambda,
            normalize_aux,
        };
        let has_adapters = tensors.iter().any(|(n, _)| n.starts_with("adapter."));
        let mut take = |name: &str| -> Result<Matrix> {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            Ok(tensors.remove(pos).1)
        };
        let mut tower = |prefix: &str| -> Result<TowerParams> {
            let mut t = [(); 10].map(|_| Matrix::zeros(1, 1));
            for (slot, name) in t.iter_mut().zip(TOWER_TENSORS) {
                *slot = take(&format!("{prefix}.{name}"))?;
            }
            let [w1, b1, w2, b2, v1, b3, v2, b4, v3, b5] = t;
            Ok(TowerParams {
                w1,
                b1,
                w2,
                b2,
                v1,
                b3,
                v2,
                b4,
                v3,
                b5,
            })
        };
        let drug = tower("drug")?;
        let disease = tower("disease")?;
        let adapters = if has_adapters {
            Some(ViewAdapters {
                a_g: take("adapter.a_g")?,
                c_g: take("adapter.c_g")?,
                a_h: take("adapter.a_h")?,
                c_h: take("adapter.c_h")?,
            })
        } else {
            None
        };
        if let Some((name, _)) = tensors.first() {
            return Err(bad(format!("unexpected tensor {name}")));
        }
        let params = ModelParams {
            drug,
            disease,
            adapters,
            hyper,
        };
        params.hyper.validate()?;
        let expected = TowerParams::zeros(params.drug.input_dim(), hidden, k);
        for (a, b) in params.drug.tensors().iter().zip(expected.tensors()) {
            if a.shape() != b.shape() {
                return Err(bad("drug tower shapes disagree with k/hidden".into()));
            }
        }
        Ok(Self { params, seed })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Load {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }
}
