use rand::Rng;

use super::classifier::{dense, init_layer};
use crate::error::{Error, Result};
use crate::mi_losses::ScoreMatrix;
use crate::ndmath::{Scalar, Tape, Tensor, Var};

/// Separable critic `T(x, y) = (W·f(x) + b) · E[y]` over classifier features
/// `f(x)` and a learned label embedding table `E`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CriticConfig {
    pub feature_width: usize,
    pub embed_width: usize,
    pub label_embed_width: usize,
    pub classes: usize,
}

impl CriticConfig {
    pub fn new(feature_width: usize, embed_width: usize, classes: usize) -> Self {
        CriticConfig {
            feature_width,
            embed_width,
            label_embed_width: embed_width,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_width != self.label_embed_width {
            return Err(Error::invalid(
                "critic",
                format!(
                    "feature embedding width {} differs from label embedding width {}",
                    self.embed_width, self.label_embed_width
                ),
            ));
        }
        if self.embed_width == 0 || self.feature_width == 0 || self.classes == 0 {
            return Err(Error::invalid("critic", format!("degenerate config {self:?}")));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![
            vec![self.feature_width, self.embed_width],
            vec![self.embed_width],
            vec![self.classes, self.label_embed_width],
        ]
    }

    pub fn init<T: Scalar>(&self, rng: &mut impl Rng) -> Result<Vec<Tensor<T>>> {
        self.validate()?;
        let shapes = self.param_shapes();
        let mut out = init_layer(&shapes[0], &shapes[1], rng);
        let bound = 1.0 / (self.label_embed_width as f64).sqrt();
        out.push(Tensor::from_fn(&shapes[2], |_| T::from_f64_lossy(rng.random_range(-bound..=bound))));
        Ok(out)
    }

    fn embed<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], features: Var) -> Result<Var> {
        if params.len() != 3 {
            return Err(Error::shape("critic", &[3], &[params.len()]));
        }
        dense(tape, features, params[0], params[1])
    }

    /// `[B, classes]` scores of every sample against every label embedding.
    pub fn class_scores<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], features: Var) -> Result<Var> {
        let g = self.embed(tape, params, features)?;
        let et = tape.transpose(params[2])?;
        tape.matmul(g, et)
    }

    /// `[K, K]` score matrix with entry `(i, j) = g(x_i) · e(y_j)`.
    pub fn pair_scores<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        features: Var,
        labels: &[usize],
    ) -> Result<Var> {
        if labels.is_empty() {
            return Err(Error::invalid("labels", "score matrix needs K >= 1"));
        }
        let g = self.embed(tape, params, features)?;
        let ey = tape.gather_rows(params[2], labels)?;
        let eyt = tape.transpose(ey)?;
        tape.matmul(g, eyt)
    }
}

/// Score matrix of a batch of features against their labels.
pub fn critic_scores<T: Scalar>(
    config: &CriticConfig,
    params: &[Tensor<T>],
    features: &Tensor<T>,
    labels: &[usize],
) -> Result<ScoreMatrix<T>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let f = tape.leaf(features.clone());
    let s = config.pair_scores(&mut tape, &vars, f, labels)?;
    ScoreMatrix::new(tape.value(s).clone())
}

/// Separable critic over two continuous variables, `T(x, y) = g(x) · h(y)`,
/// with `g` and `h` three-layer ReLU networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairCriticConfig {
    pub x_dims: usize,
    pub y_dims: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl Default for PairCriticConfig {
    fn default() -> Self {
        PairCriticConfig {
            x_dims: 1,
            y_dims: 1,
            hidden: 64,
            embed: 16,
        }
    }
}

impl PairCriticConfig {
    fn tower_shapes(&self, input: usize) -> Vec<Vec<usize>> {
        let widths = [input, self.hidden, self.hidden, self.embed];
        widths
            .windows(2)
            .flat_map(|p| [vec![p[0], p[1]], vec![p[1]]])
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = self.tower_shapes(self.x_dims);
        shapes.extend(self.tower_shapes(self.y_dims));
        shapes
    }

    pub fn init<T: Scalar>(&self, rng: &mut impl Rng) -> Vec<Tensor<T>> {
        self.param_shapes()
            .chunks(2)
            .flat_map(|pair| init_layer(&pair[0], &pair[1], rng))
            .collect()
    }

    fn tower<T: Scalar>(tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<Var> {
        let h = dense(tape, input, params[0], params[1])?;
        let h = tape.relu(h)?;
        let h = dense(tape, h, params[2], params[3])?;
        let h = tape.relu(h)?;
        dense(tape, h, params[4], params[5])
    }

    /// `[K, K]` scores for paired batches `x: [K, x_dims]`, `y: [K, y_dims]`.
    pub fn scores<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], x: Var, y: Var) -> Result<Var> {
        if params.len() != 12 {
            return Err(Error::shape("pair_critic", &[12], &[params.len()]));
        }
        let gx = Self::tower(tape, &params[..6], x)?;
        let hy = Self::tower(tape, &params[6..], y)?;
        let hyt = tape.transpose(hy)?;
        tape.matmul(gx, hyt)
    }
}
