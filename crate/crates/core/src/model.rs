//! Two-head embedding model: a shared rectified trunk feeding a triplet head
//! and a softmax head, plus a classifier on the softmax head. The retrieval
//! embedding is the concatenation `[triplet | softmax]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlaError, Result};
use crate::optim::{AdamState, OptimizerConfig};

/// Layer sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Width of each head; the full embedding is twice this.
    pub head_dim: usize,
    pub classes: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.head_dim == 0 || self.classes == 0 {
            return Err(PlaError::Config(format!(
                "all model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        2 * self.head_dim
    }

    /// `(rows, cols)` of each parameter block in storage order.
    pub fn block_shapes(&self) -> [(usize, usize); 8] {
        let ModelShape {
            input_dim: d,
            hidden_dim: h,
            head_dim: e,
            classes: c,
        } = *self;
        [
            (d, h),
            (1, h),
            (h, e),
            (1, e),
            (h, e),
            (1, e),
            (e, c),
            (1, c),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.block_shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// Which part of the embedding to use for retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingHead {
    #[default]
    Concat,
    Triplet,
    Softmax,
}

impl std::str::FromStr for EmbeddingHead {
    type Err = PlaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Self::Concat),
            "triplet" => Ok(Self::Triplet),
            "softmax" => Ok(Self::Softmax),
            other => Err(PlaError::invalid(format!(
                "unknown embedding head {other:?} (expected concat, triplet, softmax)"
            ))),
        }
    }
}

/// Model weights. Activations are row vectors: `hidden = relu(x · W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    shape: ModelShape,
    pub trunk_w: DMatrix<f64>,
    pub trunk_b: DMatrix<f64>,
    pub triplet_w: DMatrix<f64>,
    pub triplet_b: DMatrix<f64>,
    pub softmax_w: DMatrix<f64>,
    pub softmax_b: DMatrix<f64>,
    pub classifier_w: DMatrix<f64>,
    pub classifier_b: DMatrix<f64>,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub pre_activation: DMatrix<f64>,
    pub hidden: DMatrix<f64>,
    pub triplet: DMatrix<f64>,
    pub softmax: DMatrix<f64>,
    pub logits: DMatrix<f64>,
}

impl ForwardPass {
    /// `[triplet | softmax]`, `N × 2·head_dim`.
    pub fn embeddings(&self) -> DMatrix<f64> {
        concat_columns(&self.triplet, &self.softmax)
    }

    pub fn head(&self, head: EmbeddingHead) -> DMatrix<f64> {
        match head {
            EmbeddingHead::Concat => self.embeddings(),
            EmbeddingHead::Triplet => self.triplet.clone(),
            EmbeddingHead::Softmax => self.softmax.clone(),
        }
    }
}

fn concat_columns(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

fn add_bias(mut m: DMatrix<f64>, bias: &DMatrix<f64>) -> DMatrix<f64> {
    for mut row in m.row_iter_mut() {
        row += bias;
    }
    m
}

fn column_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum())
}

impl ToyModel {
    pub fn zeros(shape: ModelShape) -> Self {
        let [s0, s1, s2, s3, s4, s5, s6, s7] = shape.block_shapes();
        let z = |(r, c): (usize, usize)| DMatrix::zeros(r, c);
        Self {
            shape,
            trunk_w: z(s0),
            trunk_b: z(s1),
            triplet_w: z(s2),
            triplet_b: z(s3),
            softmax_w: z(s4),
            softmax_b: z(s5),
            classifier_w: z(s6),
            classifier_b: z(s7),
        }
    }

    /// He-uniform trunk, Glorot-uniform heads and classifier, zero biases.
    pub fn init<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let mut m = Self::zeros(shape);
        let mut fill = |w: &mut DMatrix<f64>, bound: f64| {
            w.iter_mut()
                .for_each(|v| *v = rng.random_range(-bound..bound));
        };
        let (d, h, e, c) = (
            shape.input_dim as f64,
            shape.hidden_dim as f64,
            shape.head_dim as f64,
            shape.classes as f64,
        );
        fill(&mut m.trunk_w, (6.0 / d).sqrt());
        fill(&mut m.triplet_w, (6.0 / (h + e)).sqrt());
        fill(&mut m.softmax_w, (6.0 / (h + e)).sqrt());
        fill(&mut m.classifier_w, (6.0 / (e + c)).sqrt());
        Ok(m)
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn blocks(&self) -> [&DMatrix<f64>; 8] {
        [
            &self.trunk_w,
            &self.trunk_b,
            &self.triplet_w,
            &self.triplet_b,
            &self.softmax_w,
            &self.softmax_b,
            &self.classifier_w,
            &self.classifier_b,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut DMatrix<f64>; 8] {
        [
            &mut self.trunk_w,
            &mut self.trunk_b,
            &mut self.triplet_w,
            &mut self.triplet_b,
            &mut self.softmax_w,
            &mut self.softmax_b,
            &mut self.classifier_w,
            &mut self.classifier_b,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, features: &DMatrix<f64>) -> Result<ForwardPass> {
        if features.ncols() != self.shape.input_dim {
            return Err(PlaError::invalid(format!(
                "features have {} columns, model expects {}",
                features.ncols(),
                self.shape.input_dim
            )));
        }
        let pre_activation = add_bias(features * &self.trunk_w, &self.trunk_b);
        let hidden = pre_activation.map(|v| v.max(0.0));
        let triplet = add_bias(&hidden * &self.triplet_w, &self.triplet_b);
        let softmax = add_bias(&hidden * &self.softmax_w, &self.softmax_b);
        let logits = add_bias(&softmax * &self.classifier_w, &self.classifier_b);
        Ok(ForwardPass {
            pre_activation,
            hidden,
            triplet,
            softmax,
            logits,
        })
    }

    /// Retrieval embedding for each row of `features`.
    pub fn embed(&self, features: &DMatrix<f64>, head: EmbeddingHead) -> Result<DMatrix<f64>> {
        Ok(self.forward(features)?.head(head))
    }

    /// Parameter gradients given upstream gradients on the triplet head output
    /// and on the logits. Returned as a model of the same shape.
    pub fn backward(
        &self,
        features: &DMatrix<f64>,
        pass: &ForwardPass,
        grad_triplet: &DMatrix<f64>,
        grad_logits: &DMatrix<f64>,
    ) -> ToyModel {
        let mut g = ToyModel::zeros(self.shape);
        g.classifier_w = pass.softmax.transpose() * grad_logits;
        g.classifier_b = column_sums(grad_logits);
        let grad_softmax = grad_logits * self.classifier_w.transpose();
        g.softmax_w = pass.hidden.transpose() * &grad_softmax;
        g.softmax_b = column_sums(&grad_softmax);
        g.triplet_w = pass.hidden.transpose() * grad_triplet;
        g.triplet_b = column_sums(grad_triplet);
        let mut grad_hidden =
            grad_triplet * self.triplet_w.transpose() + grad_softmax * self.softmax_w.transpose();
        grad_hidden.zip_apply(&pass.pre_activation, |gh, pre| {
            if pre <= 0.0 {
                *gh = 0.0;
            }
        });
        g.trunk_w = features.transpose() * &grad_hidden;
        g.trunk_b = column_sums(&grad_hidden);
        g
    }

    /// One Adam update with the given gradients.
    pub fn adam_step(
        &mut self,
        grads: &ToyModel,
        state: &mut AdamState,
        cfg: &OptimizerConfig,
        epoch: usize,
        lr: f64,
    ) -> Result<()> {
        if state.len() != self.shape.parameter_count() {
            return Err(PlaError::invalid("optimizer state does not match model"));
        }
        // Check everything first so a failed step leaves the model untouched.
        if grads
            .blocks()
            .iter()
            .any(|b| b.iter().any(|v| !v.is_finite()))
        {
            return Err(PlaError::NonFiniteGradient(format!(
                "model update at epoch {epoch}"
            )));
        }
        let beta1 = cfg.beta1(epoch);
        state.begin_step();
        let mut offset = 0;
        for (p, g) in self.blocks_mut().into_iter().zip(grads.blocks()) {
            let len = p.len();
            state.update(
                offset,
                p.as_mut_slice(),
                g.as_slice(),
                beta1,
                cfg.beta2,
                cfg.epsilon,
                lr,
            )?;
            offset += len;
        }
        Ok(())
    }
}

/// Model weights, optimizer moments and the global epoch counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ToyModel,
    pub optimizer: AdamState,
    pub epoch: usize,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PLACKPT1";

impl Checkpoint {
    pub fn new(model: ToyModel) -> Self {
        let n = model.shape().parameter_count();
        Self {
            model,
            optimizer: AdamState::new(n),
            epoch: 0,
        }
    }

    /// Binary layout, all integers `u64` and reals `f64`, little-endian:
    ///
    /// ```text
    /// magic "PLACKPT1"
    /// input_dim hidden_dim head_dim classes epoch adam_step
    /// weights:        8 blocks, row-major
    ///                 trunk_w trunk_b triplet_w triplet_b
    ///                 softmax_w softmax_b classifier_w classifier_b
    /// first moments:  same block layout
    /// second moments: same block layout
    /// ```
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let s = self.model.shape();
        out.write_all(CHECKPOINT_MAGIC)?;
        for v in [s.input_dim, s.hidden_dim, s.head_dim, s.classes, self.epoch] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        out.write_all(&self.optimizer.step.to_le_bytes())?;
        for block in self.model.blocks() {
            for i in 0..block.nrows() {
                for j in 0..block.ncols() {
                    out.write_all(&block[(i, j)].to_le_bytes())?;
                }
            }
        }
        for moments in [&self.optimizer.first_moment, &self.optimizer.second_moment] {
            let mut offset = 0;
            for (r, c) in s.block_shapes() {
                // Moments are stored in the model's column-major block order.
                for i in 0..r {
                    for j in 0..c {
                        out.write_all(&moments[offset + j * r + i].to_le_bytes())?;
                    }
                }
                offset += r * c;
            }
        }
        out.flush()
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let corrupt = |what: &str| PlaError::invalid(format!("corrupt checkpoint: {what}"));
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|_| corrupt("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let read_u64 = |input: &mut R| -> Result<u64> {
            let mut b = [0u8; 8];
            input
                .read_exact(&mut b)
                .map_err(|_| corrupt("truncated header"))?;
            Ok(u64::from_le_bytes(b))
        };
        let mut header = [0u64; 6];
        for h in header.iter_mut() {
            *h = read_u64(&mut input)?;
        }
        let shape = ModelShape {
            input_dim: header[0] as usize,
            hidden_dim: header[1] as usize,
            head_dim: header[2] as usize,
            classes: header[3] as usize,
        };
        shape.validate()?;
        let n = shape.parameter_count();
        let mut buf = vec![0u8; 3 * n * 8];
        input
            .read_exact(&mut buf)
            .map_err(|_| corrupt("truncated payload"))?;
        let mut extra = [0u8; 1];
        if input.read(&mut extra).map_err(|_| corrupt("read error"))? != 0 {
            return Err(corrupt("trailing bytes"));
        }
        let reals: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut model = ToyModel::zeros(shape);
        let mut offset = 0;
        for block in model.blocks_mut() {
            let (r, c) = block.shape();
            *block = DMatrix::from_row_slice(r, c, &reals[offset..offset + r * c]);
            offset += r * c;
        }
        let mut moments = [vec![0.0; n], vec![0.0; n]];
        for m in moments.iter_mut() {
            let mut local = 0;
            for (r, c) in shape.block_shapes() {
                for i in 0..r {
                    for j in 0..c {
                        m[local + j * r + i] = reals[offset];
                        offset += 1;
                    }
                }
                local += r * c;
            }
        }
        let [first_moment, second_moment] = moments;
        Ok(Self {
            model,
            optimizer: AdamState {
                first_moment,
                second_moment,
                step: header[5],
            },
            epoch: header[4] as usize,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| PlaError::io(path, e))?;
        self.write_to(BufWriter::new(f))
            .map_err(|e| PlaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| PlaError::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}
