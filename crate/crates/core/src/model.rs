//! Student encoder: embedding lookup, optional affine residual backbone,
//! masked mean pooling, two bias-free projections and L2 normalization.
//!
//! Parameters are stored in `T` (f32 for training, f64 for gradient checks);
//! every reduction accumulates in f64 in a fixed order.

use crate::cloner::{ModelBundle, ModelConfig, BACKBONE_BIAS, BACKBONE_WEIGHT, DENSE1, DENSE2, EMBEDDING};
use crate::error::{Error, Result};
use crate::store::{TargetKind, TeacherOutput};
use crate::tensor::{Tensor, TensorMap};

pub trait Real: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Parameter groups, also used (with `T = f64`) as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    /// `vocab x d`
    pub embedding: Vec<T>,
    /// `d x d` and `d`; the backbone computes `x + W x + b`.
    pub backbone: Option<(Vec<T>, Vec<T>)>,
    /// `h x d`
    pub dense1: Vec<T>,
    /// `d x h`
    pub dense2: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Embedding,
    Backbone,
    Head,
}

impl<T: Real> Params<T> {
    pub fn zeros_like<U>(other: &Params<U>) -> Self {
        let z = |v: &Vec<U>| vec![T::default(); v.len()];
        Params {
            embedding: z(&other.embedding),
            backbone: other.backbone.as_ref().map(|(w, b)| (z(w), z(b))),
            dense1: z(&other.dense1),
            dense2: z(&other.dense2),
        }
    }

    /// Every tensor with its name and group, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, Group, &[T])> {
        let mut v: Vec<(&'static str, Group, &[T])> = vec![(EMBEDDING, Group::Embedding, &self.embedding)];
        if let Some((w, b)) = &self.backbone {
            v.push((BACKBONE_WEIGHT, Group::Backbone, w));
            v.push((BACKBONE_BIAS, Group::Backbone, b));
        }
        v.push((DENSE1, Group::Head, &self.dense1));
        v.push((DENSE2, Group::Head, &self.dense2));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, Group, &mut [T])> {
        let mut v: Vec<(&'static str, Group, &mut [T])> = vec![(EMBEDDING, Group::Embedding, &mut self.embedding)];
        if let Some((w, b)) = &mut self.backbone {
            v.push((BACKBONE_WEIGHT, Group::Backbone, w));
            v.push((BACKBONE_BIAS, Group::Backbone, b));
        }
        v.push((DENSE1, Group::Head, &mut self.dense1));
        v.push((DENSE2, Group::Head, &mut self.dense2));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub embedding: bool,
    pub backbone: bool,
    pub head: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Trainable {
            embedding: true,
            backbone: false,
            head: true,
        }
    }
}

impl Trainable {
    pub fn contains(&self, g: Group) -> bool {
        match g {
            Group::Embedding => self.embedding,
            Group::Backbone => self.backbone,
            Group::Head => self.head,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
    pub trainable: Trainable,
}

/// Per-row intermediates kept for the backward pass.
#[derive(Debug, Clone)]
struct RowCache {
    tokens: Vec<u32>,
    pooled: Vec<f64>,
    pre_dense: Vec<f64>,
    hidden: Vec<f64>,
    norm: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    output: TargetKind,
    rows: Vec<RowCache>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// `rows x dim` unit vectors.
    pub s_hat: Vec<f64>,
    pub dim: usize,
    pub cache: ForwardCache,
}

impl Forward {
    pub fn rows(&self) -> usize {
        self.cache.rows.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.s_hat[r * self.dim..(r + 1) * self.dim]
    }

    /// The un-normalized pooled (and backbone-transformed) vector of row `r`.
    pub fn pre_dense(&self, r: usize) -> &[f64] {
        &self.cache.rows[r].pre_dense
    }
}

fn tensor_to<T: Real>(t: &Tensor) -> Vec<T> {
    t.as_f32().unwrap().iter().map(|&x| T::from_f64(x as f64)).collect()
}

fn matvec(m: &[impl Real], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        out[r] = row.iter().zip(x).map(|(&a, &b)| a.to_f64() * b).sum();
    }
}

fn matvec_t(m: &[impl Real], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a.to_f64() * x[r];
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl<T: Real> StudentModel<T> {
    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self> {
        bundle.validate()?;
        let params = Params {
            embedding: bundle.embedding.data().iter().map(|&x| T::from_f64(x as f64)).collect(),
            backbone: (!bundle.backbone.is_empty()).then(|| {
                (
                    tensor_to(&bundle.backbone[BACKBONE_WEIGHT]),
                    tensor_to(&bundle.backbone[BACKBONE_BIAS]),
                )
            }),
            dense1: tensor_to(&bundle.head[DENSE1]),
            dense2: tensor_to(&bundle.head[DENSE2]),
        };
        Ok(StudentModel {
            config: bundle.config,
            params,
            trainable: Trainable::default(),
        })
    }

    /// Converts back to an f32 bundle. Lossless when `T = f32`.
    pub fn to_bundle(&self) -> Result<ModelBundle> {
        let ModelConfig { d, h, vocab_size, .. } = self.config;
        let f = |v: &[T]| v.iter().map(|x| x.to_f64() as f32).collect::<Vec<f32>>();
        let mut backbone = TensorMap::new();
        if let Some((w, b)) = &self.params.backbone {
            backbone.insert(BACKBONE_WEIGHT.into(), Tensor::f32(vec![d, d], f(w)).unwrap());
            backbone.insert(BACKBONE_BIAS.into(), Tensor::f32(vec![d], f(b)).unwrap());
        }
        let mut head = TensorMap::new();
        head.insert(DENSE1.into(), Tensor::f32(vec![h, d], f(&self.params.dense1)).unwrap());
        head.insert(DENSE2.into(), Tensor::f32(vec![d, h], f(&self.params.dense2)).unwrap());
        Ok(ModelBundle {
            embedding: crate::cloner::EmbeddingMatrix::new(vocab_size, d, f(&self.params.embedding))?,
            backbone,
            head,
            config: self.config,
        })
    }

    /// Encodes a padded batch. `ids`/`mask` are `rows x seq_len`.
    pub fn forward(&self, ids: &[u32], mask: &[bool], seq_len: usize, output: TargetKind) -> Result<Forward> {
        let ModelConfig { d, h, vocab_size, .. } = self.config;
        if seq_len == 0 || ids.len() != mask.len() || !ids.len().is_multiple_of(seq_len) {
            return Err(Error::Shape(format!(
                "ids ({}) and mask ({}) must both be rows x {seq_len}",
                ids.len(),
                mask.len()
            )));
        }
        let rows = ids.len() / seq_len;
        let mut s_hat = Vec::with_capacity(rows * d);
        let mut cache = Vec::with_capacity(rows);
        for r in 0..rows {
            let tokens: Vec<u32> = ids[r * seq_len..(r + 1) * seq_len]
                .iter()
                .zip(&mask[r * seq_len..(r + 1) * seq_len])
                .filter(|(_, &m)| m)
                .map(|(&id, _)| id)
                .collect();
            if tokens.is_empty() {
                return Err(Error::AllMasked { row: r });
            }
            if let Some(&bad) = tokens.iter().find(|&&id| id as usize >= vocab_size) {
                return Err(Error::Invalid(format!("row {r}: token id {bad} >= vocabulary size {vocab_size}")));
            }
            let mut pooled = vec![0.0f64; d];
            for &id in &tokens {
                let row = &self.params.embedding[id as usize * d..(id as usize + 1) * d];
                for (p, &x) in pooled.iter_mut().zip(row) {
                    *p += x.to_f64();
                }
            }
            let n = tokens.len() as f64;
            pooled.iter_mut().for_each(|p| *p /= n);

            // the backbone is affine, so applying it after pooling equals pooling its per-token output
            let mut pre = pooled.clone();
            if let Some((w, b)) = &self.params.backbone {
                let mut wx = vec![0.0; d];
                matvec(w, d, d, &pooled, &mut wx);
                for i in 0..d {
                    pre[i] += wx[i] + b[i].to_f64();
                }
            }

            let (out, hidden) = match output {
                TargetKind::Final => {
                    let mut hidden = vec![0.0; h];
                    matvec(&self.params.dense1, h, d, &pre, &mut hidden);
                    let mut z = vec![0.0; d];
                    matvec(&self.params.dense2, d, h, &hidden, &mut z);
                    (z, hidden)
                }
                TargetKind::PreDense => (pre.clone(), Vec::new()),
            };
            let nz = norm(&out);
            if !(nz >= 1e-12) {
                return Err(if nz.is_finite() {
                    Error::Degenerate { row: r }
                } else {
                    Error::NonFinite { what: "forward output", row: r }
                });
            }
            s_hat.extend(out.iter().map(|x| x / nz));
            cache.push(RowCache {
                tokens,
                pooled,
                pre_dense: pre,
                hidden,
                norm: nz,
            });
        }
        Ok(Forward {
            s_hat,
            dim: d,
            cache: ForwardCache { output, rows: cache },
        })
    }

    /// Gradients of the loss with respect to every parameter, given the
    /// upstream gradient on the normalized outputs. Rows are accumulated in
    /// order; embedding rows not referenced by the batch stay zero.
    pub fn backward(&self, fwd: &Forward, grad_s_hat: &[f64]) -> Params<f64> {
        let ModelConfig { d, h, .. } = self.config;
        let mut grads: Params<f64> = Params::zeros_like(&self.params);
        let mut d_hidden = vec![0.0; h];
        let mut d_pre = vec![0.0; d];
        let mut d_pooled = vec![0.0; d];
        for (r, row) in fwd.cache.rows.iter().enumerate() {
            let s = &fwd.s_hat[r * d..(r + 1) * d];
            let g = &grad_s_hat[r * d..(r + 1) * d];
            // through the normalization: (I - s sᵀ) g / ‖z‖
            let sg: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
            let dz: Vec<f64> = s.iter().zip(g).map(|(&si, &gi)| (gi - si * sg) / row.norm).collect();

            match fwd.cache.output {
                TargetKind::Final => {
                    for i in 0..d {
                        let gw = &mut grads.dense2[i * h..(i + 1) * h];
                        for (gwk, &uk) in gw.iter_mut().zip(&row.hidden) {
                            *gwk += dz[i] * uk;
                        }
                    }
                    matvec_t(&self.params.dense2, d, h, &dz, &mut d_hidden);
                    for k in 0..h {
                        let gw = &mut grads.dense1[k * d..(k + 1) * d];
                        for (gwj, &pj) in gw.iter_mut().zip(&row.pre_dense) {
                            *gwj += d_hidden[k] * pj;
                        }
                    }
                    matvec_t(&self.params.dense1, h, d, &d_hidden, &mut d_pre);
                }
                TargetKind::PreDense => d_pre.copy_from_slice(&dz),
            }

            d_pooled.copy_from_slice(&d_pre);
            if let (Some((w, _)), Some((gw, gb))) = (&self.params.backbone, &mut grads.backbone) {
                for i in 0..d {
                    let gwi = &mut gw[i * d..(i + 1) * d];
                    for (gij, &mj) in gwi.iter_mut().zip(&row.pooled) {
                        *gij += d_pre[i] * mj;
                    }
                    gb[i] += d_pre[i];
                }
                let mut wt = vec![0.0; d];
                matvec_t(w, d, d, &d_pre, &mut wt);
                for (dp, x) in d_pooled.iter_mut().zip(wt) {
                    *dp += x;
                }
            }

            let inv_n = 1.0 / row.tokens.len() as f64;
            for &id in &row.tokens {
                let ge = &mut grads.embedding[id as usize * d..(id as usize + 1) * d];
                for (e, &dp) in ge.iter_mut().zip(&d_pooled) {
                    *e += dp * inv_n;
                }
            }
        }
        grads
    }

    /// Encodes a single token sequence to its unit output vector.
    pub fn embed(&self, ids: &[u32], output: TargetKind) -> Result<Vec<f64>> {
        let mask = vec![true; ids.len()];
        if ids.is_empty() {
            return Err(Error::AllMasked { row: 0 });
        }
        Ok(self.forward(ids, &mask, ids.len(), output)?.s_hat)
    }

    /// Final and pre-dense vectors of one sequence, as stored by the teacher store.
    pub fn teacher_output(&self, ids: &[u32]) -> Result<TeacherOutput> {
        if ids.is_empty() {
            return Err(Error::AllMasked { row: 0 });
        }
        let fwd = self.forward(ids, &vec![true; ids.len()], ids.len(), TargetKind::Final)?;
        Ok(TeacherOutput {
            final_embedding: fwd.row(0).iter().map(|&x| x as f32).collect(),
            pre_dense: Some(fwd.pre_dense(0).iter().map(|&x| x as f32).collect()),
        })
    }
}

/// Mean cosine distance between paired unit vectors and its gradient with
/// respect to `s_hat` (`-t / N`).
pub fn cosine_loss(s_hat: &[f64], t_hat: &[f64], dim: usize) -> Result<(f64, Vec<f64>)> {
    if s_hat.len() != t_hat.len() || dim == 0 || !s_hat.len().is_multiple_of(dim) || s_hat.is_empty() {
        return Err(Error::Shape(format!(
            "student ({}) and target ({}) batches must be equal non-empty multiples of {dim}",
            s_hat.len(),
            t_hat.len()
        )));
    }
    let n = s_hat.len() / dim;
    let mut loss = 0.0;
    for r in 0..n {
        let t = &t_hat[r * dim..(r + 1) * dim];
        let tn = norm(t);
        if !((tn - 1.0).abs() <= 1e-4) {
            return Err(Error::NotUnitNorm { row: r, norm: tn });
        }
        let s = &s_hat[r * dim..(r + 1) * dim];
        let cos: f64 = s.iter().zip(t).map(|(a, b)| a * b).sum();
        loss += 1.0 - cos;
    }
    let loss = (loss / n as f64).clamp(0.0, 2.0);
    let grad = t_hat.iter().map(|&t| -t / n as f64).collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloner::EmbeddingMatrix;

    fn bundle(vocab: usize, d: usize, h: usize, embedding: Vec<f32>, dense1: Vec<f32>, dense2: Vec<f32>) -> ModelBundle {
        let mut head = TensorMap::new();
        head.insert(DENSE1.into(), Tensor::f32(vec![h, d], dense1).unwrap());
        head.insert(DENSE2.into(), Tensor::f32(vec![d, h], dense2).unwrap());
        ModelBundle {
            embedding: EmbeddingMatrix::new(vocab, d, embedding).unwrap(),
            backbone: TensorMap::new(),
            head,
            config: ModelConfig {
                d,
                h,
                max_len: 16,
                vocab_size: vocab,
            },
        }
    }

    fn eye(n: usize) -> Vec<f32> {
        let mut v = vec![0.0; n * n];
        (0..n).for_each(|i| v[i * n + i] = 1.0);
        v
    }

    #[test]
    fn single_token_identity_head() {
        let b = bundle(2, 2, 2, vec![3.0, 4.0, 1.0, 0.0], eye(2), eye(2));
        let m: StudentModel<f32> = StudentModel::from_bundle(&b).unwrap();
        let out = m.embed(&[0], TargetKind::Final).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-12 && (out[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn opposite_tokens_are_degenerate() {
        let b = bundle(2, 2, 2, vec![1.0, 2.0, -1.0, -2.0], eye(2), eye(2));
        let m: StudentModel<f64> = StudentModel::from_bundle(&b).unwrap();
        assert!(matches!(m.embed(&[0, 1], TargetKind::Final), Err(Error::Degenerate { row: 0 })));
    }

    #[test]
    fn all_masked_row_errors() {
        let b = bundle(2, 2, 2, vec![1.0, 2.0, -1.0, -2.0], eye(2), eye(2));
        let m: StudentModel<f64> = StudentModel::from_bundle(&b).unwrap();
        let err = m.forward(&[0, 0, 1, 0], &[true, false, false, false], 2, TargetKind::Final);
        assert!(matches!(err, Err(Error::AllMasked { row: 1 })));
    }

    #[test]
    fn cosine_loss_examples() {
        let s = [1.0, 0.0];
        assert_eq!(cosine_loss(&s, &[1.0, 0.0], 2).unwrap().0, 0.0);
        assert_eq!(cosine_loss(&s, &[0.0, 1.0], 2).unwrap().0, 1.0);
        // cosines 0.8 and 0.6 -> (0.2 + 0.4) / 2
        let s = [1.0, 0.0, 1.0, 0.0];
        let t = [0.8, 0.6, 0.6, 0.8];
        let (loss, grad) = cosine_loss(&s, &t, 2).unwrap();
        assert!((loss - 0.3).abs() < 1e-15);
        assert_eq!(grad, vec![-0.4, -0.3, -0.3, -0.4]);
        assert!(matches!(cosine_loss(&[1.0, 0.0], &[2.0, 0.0], 2), Err(Error::NotUnitNorm { .. })));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let b = ModelBundle::random(ModelConfig { d: 4, h: 6, max_len: 8, vocab_size: 10 }, true, 1).unwrap();
        let m: StudentModel<f64> = StudentModel::from_bundle(&b).unwrap();
        let fwd = m.forward(&[1, 2, 3, 4, 5, 0], &[true; 6], 3, TargetKind::Final).unwrap();
        let g = m.backward(&fwd, &[0.0; 8]);
        assert!(g.tensors().iter().all(|(_, _, t)| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn duplicate_token_gradient_is_sum_of_positions() {
        // pooled = (e_a + e_a + e_b)/3; embedding grad of a = 2 * dpooled / 3
        let b = ModelBundle::random(ModelConfig { d: 3, h: 5, max_len: 8, vocab_size: 4 }, false, 9).unwrap();
        let m: StudentModel<f64> = StudentModel::from_bundle(&b).unwrap();
        let fwd = m.forward(&[1, 1, 2], &[true; 3], 3, TargetKind::Final).unwrap();
        let up = [0.3, -0.2, 0.5];
        let g = m.backward(&fwd, &up);
        let ga = &g.embedding[3..6];
        let gb = &g.embedding[6..9];
        for i in 0..3 {
            assert!((ga[i] - 2.0 * gb[i]).abs() < 1e-15);
        }
        assert!(g.embedding[0..3].iter().chain(&g.embedding[9..12]).all(|&x| x == 0.0));
    }

    #[test]
    fn bundle_roundtrip_is_lossless_for_f32() {
        let b = ModelBundle::random(ModelConfig { d: 4, h: 6, max_len: 8, vocab_size: 10 }, true, 5).unwrap();
        let m: StudentModel<f32> = StudentModel::from_bundle(&b).unwrap();
        assert_eq!(m.to_bundle().unwrap(), b);
    }
}
