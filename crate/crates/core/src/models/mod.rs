//! Classifier backbone and the critic networks used by the MI losses.

mod classifier;
mod critic;

pub use classifier::{classifier_forward, ClassifierConfig, ClassifierOutput, ConvStack};
pub use critic::{critic_scores, CriticConfig, PairCriticConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mi_losses::LossKind;
use crate::ndmath::{Params, Scalar, Tape, Tensor, Var};

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(rows: &Tensor<T>) -> Vec<usize> {
    let cols = rows.shape().last().copied().unwrap_or(1);
    rows.data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Predicted class per sample from logits (CE) or per-class critic scores (MI).
/// Both are read the same way: argmax with lowest-index tie-break.
pub fn predict<T: Scalar>(_kind: LossKind, logits_or_scores: &Tensor<T>) -> Vec<usize> {
    argmax_rows(logits_or_scores)
}

/// Classifier plus critic; parameters are the classifier tensors followed by
/// the three critic tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub classifier: ClassifierConfig,
    pub critic: CriticConfig,
}

/// Values a forward pass exposes to losses and prediction.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub features: Var,
    pub logits: Var,
}

impl ModelSpec {
    /// Critic on the classifier's penultimate features.
    pub fn new(classifier: ClassifierConfig, embed_width: usize) -> Self {
        ModelSpec {
            classifier,
            critic: CriticConfig::new(classifier.feature_width(), embed_width, classifier.classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.classifier.param_shapes()?;
        self.critic.validate()
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> Result<Params<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = self.classifier.init(&mut rng)?;
        tensors.extend(self.critic.init(&mut rng)?);
        Ok(Params::new(tensors))
    }

    pub fn param_count(&self) -> Result<usize> {
        let critic: usize = self.critic.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum();
        Ok(self.classifier.param_count()? + critic)
    }

    /// Records every parameter tensor as a leaf.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>) -> Vec<Var> {
        params.tensors().iter().map(|t| tape.leaf(t.clone())).collect()
    }

    fn split_vars<'a>(&self, vars: &'a [Var]) -> (&'a [Var], &'a [Var]) {
        vars.split_at(self.classifier.tensor_count())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<ModelOutput> {
        let (cls, _) = self.split_vars(vars);
        let out = self.classifier.forward(tape, cls, x)?;
        Ok(ModelOutput {
            features: out.features,
            logits: out.logits,
        })
    }

    /// `[K, K]` critic scores of a batch against its own labels.
    pub fn pair_scores<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        out: &ModelOutput,
        labels: &[usize],
    ) -> Result<Var> {
        let (_, critic) = self.split_vars(vars);
        self.critic.pair_scores(tape, critic, out.features, labels)
    }

    /// `[B, classes]` rows whose argmax is the prediction under `kind`.
    pub fn decision_rows<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        out: &ModelOutput,
        kind: LossKind,
    ) -> Result<Var> {
        if kind.is_mi() {
            let (_, critic) = self.split_vars(vars);
            self.critic.class_scores(tape, critic, out.features)
        } else {
            Ok(out.logits)
        }
    }

    /// Predicted classes for `batch` under a model trained with `kind`.
    pub fn predict<T: Scalar>(&self, params: &Params<T>, batch: &Tensor<T>, kind: LossKind) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, params);
        let x = tape.leaf(batch.clone());
        let out = self.forward(&mut tape, &vars, x)?;
        let rows = self.decision_rows(&mut tape, &vars, &out, kind)?;
        Ok(predict(kind, tape.value(rows)))
    }
}
