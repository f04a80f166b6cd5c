use rand::Rng;

use crate::error::{Error, Result};
use crate::ndmath::{conv_output_size, pool_output_size, Params, Scalar, Tape, Tensor, Var};

/// Convolutional front end: conv → relu → pool → conv → relu → pool, with the
/// same pooling module applied after both convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStack {
    pub conv1_out: usize,
    pub conv1_kernel: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub conv2_out: usize,
    pub conv2_kernel: usize,
}

/// Classifier backbone. Without a conv stack the input is a flat feature
/// vector of `channels * height * width` values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv: Option<ConvStack>,
    /// Widths of the first two fully connected layers; the third maps to `classes`.
    pub hidden: [usize; 2],
    pub classes: usize,
}

impl ClassifierConfig {
    /// The tutorial CIFAR-10 network: 3×32×32 → 6@5×5 → pool → 16@5×5 → pool → 400 → 120 → 84 → 10.
    pub fn cifar10() -> Self {
        ClassifierConfig {
            channels: 3,
            height: 32,
            width: 32,
            conv: Some(ConvStack {
                conv1_out: 6,
                conv1_kernel: 5,
                pool_kernel: 2,
                pool_stride: 2,
                conv2_out: 16,
                conv2_kernel: 5,
            }),
            hidden: [120, 84],
            classes: 10,
        }
    }

    /// Fully connected network over flat `dims`-wide inputs.
    pub fn mlp(dims: usize, hidden: [usize; 2], classes: usize) -> Self {
        ClassifierConfig {
            channels: 1,
            height: 1,
            width: dims,
            conv: None,
            hidden,
            classes,
        }
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Per-sample input shape, without the batch axis.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.conv {
            Some(_) => vec![self.channels, self.height, self.width],
            None => vec![self.input_len()],
        }
    }

    /// Width of the flattened conv output feeding the first dense layer.
    pub fn flat_size(&self) -> Result<usize> {
        let Some(cs) = self.conv else {
            return Ok(self.input_len());
        };
        let fits = |h: usize, w: usize, k: usize| k >= 1 && k <= h && k <= w;
        let (h, w) = (self.height, self.width);
        if !fits(h, w, cs.conv1_kernel) {
            return Err(Error::invalid("conv1_kernel", format!("{} does not fit {h}x{w}", cs.conv1_kernel)));
        }
        let (h, w) = conv_output_size(h, w, cs.conv1_kernel, cs.conv1_kernel);
        if !fits(h, w, cs.pool_kernel) || cs.pool_stride == 0 {
            return Err(Error::invalid("pool_kernel", format!("{} does not fit {h}x{w}", cs.pool_kernel)));
        }
        let (h, w) = pool_output_size(h, w, cs.pool_kernel, cs.pool_stride);
        if !fits(h, w, cs.conv2_kernel) {
            return Err(Error::invalid("conv2_kernel", format!("{} does not fit {h}x{w}", cs.conv2_kernel)));
        }
        let (h, w) = conv_output_size(h, w, cs.conv2_kernel, cs.conv2_kernel);
        if !fits(h, w, cs.pool_kernel) {
            return Err(Error::invalid("pool_kernel", format!("{} does not fit {h}x{w}", cs.pool_kernel)));
        }
        let (h, w) = pool_output_size(h, w, cs.pool_kernel, cs.pool_stride);
        Ok(cs.conv2_out * h * w)
    }

    /// Width of the penultimate layer, the features handed to the critic.
    pub fn feature_width(&self) -> usize {
        self.hidden[1]
    }

    /// Parameter tensor shapes in binding order.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.classes < 2 || self.hidden.contains(&0) || self.input_len() == 0 {
            return Err(Error::invalid("classifier", format!("degenerate config {self:?}")));
        }
        let mut shapes = Vec::new();
        if let Some(cs) = self.conv {
            let (k1, k2) = (cs.conv1_kernel, cs.conv2_kernel);
            shapes.push(vec![cs.conv1_out, self.channels, k1, k1]);
            shapes.push(vec![cs.conv1_out]);
            shapes.push(vec![cs.conv2_out, cs.conv1_out, k2, k2]);
            shapes.push(vec![cs.conv2_out]);
        }
        let widths = [self.flat_size()?, self.hidden[0], self.hidden[1], self.classes];
        for pair in widths.windows(2) {
            shapes.push(vec![pair[0], pair[1]]);
            shapes.push(vec![pair[1]]);
        }
        Ok(shapes)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.param_shapes()?.iter().map(|s| s.iter().product::<usize>()).sum())
    }

    /// Uniform `±1/√fan_in` initialization, biases included.
    pub fn init<T: Scalar>(&self, rng: &mut impl Rng) -> Result<Vec<Tensor<T>>> {
        Ok(self.param_shapes()?.chunks(2).flat_map(|pair| init_layer(&pair[0], &pair[1], rng)).collect())
    }

    pub(crate) fn tensor_count(&self) -> usize {
        if self.conv.is_some() {
            10
        } else {
            6
        }
    }

    /// Records the forward pass for a batch `x` of shape `[B, ...sample_shape]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<ClassifierOutput> {
        if params.len() != self.tensor_count() {
            return Err(Error::shape("classifier_forward", &[self.tensor_count()], &[params.len()]));
        }
        let xs = tape.value(x).shape().to_vec();
        let expected = self.sample_shape();
        if xs.len() != expected.len() + 1 || xs[1..] != expected[..] {
            let mut want = vec![xs.first().copied().unwrap_or(0)];
            want.extend(expected);
            return Err(Error::shape("classifier_forward", &xs, &want));
        }
        let batch = xs[0];
        let mut rest = params;
        let mut h = x;
        if let Some(cs) = self.conv {
            let c1 = tape.conv2d(h, rest[0], rest[1])?;
            let c1 = tape.relu(c1)?;
            let p1 = tape.max_pool2d(c1, cs.pool_kernel, cs.pool_stride)?;
            let c2 = tape.conv2d(p1, rest[2], rest[3])?;
            let c2 = tape.relu(c2)?;
            let p2 = tape.max_pool2d(c2, cs.pool_kernel, cs.pool_stride)?;
            h = tape.reshape(p2, &[batch, self.flat_size()?])?;
            rest = &rest[4..];
        }
        let h1 = dense(tape, h, rest[0], rest[1])?;
        let h1 = tape.relu(h1)?;
        let h2 = dense(tape, h1, rest[2], rest[3])?;
        let features = tape.relu(h2)?;
        let logits = dense(tape, features, rest[4], rest[5])?;
        Ok(ClassifierOutput { features, logits })
    }
}

/// Penultimate features and class logits of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    pub features: Var,
    pub logits: Var,
}

pub(crate) fn dense<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

pub(crate) fn init_layer<T: Scalar>(weight: &[usize], bias: &[usize], rng: &mut impl Rng) -> Vec<Tensor<T>> {
    // Dense weights are stored [in, out]; conv weights [out, in, kh, kw].
    let fan_in: usize = match weight {
        [fan_in, _] => *fan_in,
        _ => weight[1..].iter().product(),
    };
    let bound = 1.0 / (fan_in as f64).sqrt();
    [weight, bias]
        .into_iter()
        .map(|shape| Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..=bound))))
        .collect()
}

/// Logits of `batch` under `params`, without gradient bookkeeping exposed.
pub fn classifier_forward<T: Scalar>(
    config: &ClassifierConfig,
    params: &Params<T>,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors()[..config.tensor_count()]
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect();
    let x = tape.leaf(batch.clone());
    let out = config.forward(&mut tape, &vars, x)?;
    Ok(tape.value(out.logits).clone())
}
