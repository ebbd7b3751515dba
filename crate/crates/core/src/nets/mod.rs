//! The predictor (encoder + decoder) and the referee network.
//!
//! Both networks keep their parameters as an ordered list of [`Tensor`]s so
//! they can be loaded into a [`Graph`] as leaves, updated functionally, and
//! written to a checkpoint. Graph-level forward passes live on the shape
//! descriptors ([`ModelShape`], [`RefereeShape`]); the parameter types offer
//! plain evaluation on top of those.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC};

use crate::diffengine::{Graph, Tensor, Var};
use rand::Rng;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetError {
    #[error("{what}: expected {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid network description: {0}")]
    Invalid(String),
}

/// Output head of the predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// One real output per row.
    Regression,
    /// Row-normalized class probabilities.
    Classification { classes: usize },
}

impl Head {
    pub fn output_dim(&self) -> usize {
        match self {
            Head::Regression => 1,
            Head::Classification { classes } => *classes,
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Head::Regression => write!(f, "regression"),
            Head::Classification { classes } => write!(f, "classification:{classes}"),
        }
    }
}

impl FromStr for Head {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "regression" {
            return Ok(Head::Regression);
        }
        if let Some(k) = s.strip_prefix("classification:") {
            let classes: usize = k
                .parse()
                .map_err(|_| NetError::Invalid(format!("bad class count in {s:?}")))?;
            if classes >= 2 {
                return Ok(Head::Classification { classes });
            }
        }
        Err(NetError::Invalid(format!("unknown head {s:?}")))
    }
}

/// Layout of the predictor: a ReLU input layer, `depth - 1` residual ReLU
/// blocks of constant width, and a linear decoder head. The embedding is the
/// output of the last encoder block, so its size equals `width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub head: Head,
}

impl ModelShape {
    pub fn new(input_dim: usize, width: usize, depth: usize, head: Head) -> Result<Self, NetError> {
        if input_dim == 0 || width == 0 || depth == 0 {
            return Err(NetError::Invalid(format!(
                "input_dim={input_dim}, width={width}, depth={depth} must all be positive"
            )));
        }
        Ok(Self {
            input_dim,
            width,
            depth,
            head,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.width
    }

    /// Names and shapes of the parameter tensors, in storage order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::with_capacity(2 * self.depth + 2);
        for layer in 0..self.depth {
            let fan_in = if layer == 0 { self.input_dim } else { self.width };
            out.push((format!("encoder.{layer}.weight"), (fan_in, self.width)));
            out.push((format!("encoder.{layer}.bias"), (1, self.width)));
        }
        let k = self.head.output_dim();
        out.push(("decoder.weight".into(), (self.width, k)));
        out.push(("decoder.bias".into(), (1, k)));
        out
    }

    fn check_params(&self, g: &Graph, params: &[Var]) -> Result<(), NetError> {
        let layout = self.layout();
        if params.len() != layout.len() {
            return Err(NetError::Shape {
                what: "predictor parameter count",
                expected: layout.len().to_string(),
                found: params.len().to_string(),
            });
        }
        for ((name, shape), &p) in layout.iter().zip(params) {
            if g.shape(p) != *shape {
                return Err(NetError::Shape {
                    what: "predictor parameter",
                    expected: format!("{name} {shape:?}"),
                    found: format!("{:?}", g.shape(p)),
                });
            }
        }
        Ok(())
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<(), NetError> {
        let (_, cols) = g.shape(x);
        if cols != self.input_dim {
            return Err(NetError::Shape {
                what: "feature columns",
                expected: self.input_dim.to_string(),
                found: cols.to_string(),
            });
        }
        Ok(())
    }

    /// Encoder forward pass: `x` is `batch x input_dim`, the result is
    /// `batch x embedding_dim`.
    pub fn encode(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var, NetError> {
        self.check_params(g, params)?;
        self.check_input(g, x)?;
        let z = g.matmul(x, params[0]);
        let z = g.add_row(z, params[1]);
        let mut h = g.relu(z);
        for layer in 1..self.depth {
            let z = g.matmul(h, params[2 * layer]);
            let z = g.add_row(z, params[2 * layer + 1]);
            let r = g.relu(z);
            h = g.add(h, r);
        }
        Ok(h)
    }

    /// Decoder applied to an embedding batch.
    pub fn decode(&self, g: &mut Graph, params: &[Var], embedding: Var) -> Result<Var, NetError> {
        self.check_params(g, params)?;
        let n = params.len();
        let z = g.matmul(embedding, params[n - 2]);
        let z = g.add_row(z, params[n - 1]);
        Ok(match self.head {
            Head::Regression => z,
            Head::Classification { .. } => g.softmax_rows(z),
        })
    }

    /// Full predictor: regression values (`batch x 1`) or class probabilities.
    pub fn predict(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var, NetError> {
        let h = self.encode(g, params, x)?;
        self.decode(g, params, h)
    }

    /// Encoder and decoder in one pass, returning `(embedding, predictions)`.
    pub fn encode_predict(
        &self,
        g: &mut Graph,
        params: &[Var],
        x: Var,
    ) -> Result<(Var, Var), NetError> {
        let h = self.encode(g, params, x)?;
        let y = self.decode(g, params, h)?;
        Ok((h, y))
    }
}

/// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
/// for both weights and biases of each layer.
fn init_layout<R: Rng + ?Sized>(layout: &[(String, (usize, usize))], rng: &mut R) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(layout.len());
    let mut fan_in = 1;
    for (name, (r, c)) in layout {
        if name.ends_with("weight") {
            fan_in = *r;
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..r * c).map(|_| rng.random_range(-bound..bound)).collect();
        out.push(Tensor::new(*r, *c, data));
    }
    out
}

fn check_tensors(
    layout: &[(String, (usize, usize))],
    tensors: &[Tensor],
    what: &'static str,
) -> Result<(), NetError> {
    if tensors.len() != layout.len() {
        return Err(NetError::Shape {
            what,
            expected: format!("{} tensors", layout.len()),
            found: tensors.len().to_string(),
        });
    }
    for ((name, shape), t) in layout.iter().zip(tensors) {
        if t.shape() != *shape {
            return Err(NetError::Shape {
                what,
                expected: format!("{name} {shape:?}"),
                found: format!("{:?}", t.shape()),
            });
        }
        if !t.is_finite() {
            return Err(NetError::NonFinite("parameter"));
        }
    }
    Ok(())
}

/// Predictor parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    shape: ModelShape,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Self {
        let tensors = init_layout(&shape.layout(), rng);
        Self { shape, tensors }
    }

    pub fn zeros(shape: ModelShape) -> Self {
        let tensors = shape
            .layout()
            .into_iter()
            .map(|(_, (r, c))| Tensor::zeros(r, c))
            .collect();
        Self { shape, tensors }
    }

    pub fn from_tensors(shape: ModelShape, tensors: Vec<Tensor>) -> Result<Self, NetError> {
        check_tensors(&shape.layout(), &tensors, "predictor parameters")?;
        Ok(Self { shape, tensors })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Mutable access for tests and hand-built instances; shapes must be kept.
    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Records every parameter tensor as a leaf of `g`.
    pub fn load(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// `theta - rate * update`, tensor by tensor. Returns an error instead of
    /// storing non-finite values.
    pub fn stepped(&self, update: &[Tensor], rate: f64) -> Result<Self, NetError> {
        let tensors = step_tensors(&self.tensors, update, rate)?;
        Ok(Self {
            shape: self.shape,
            tensors,
        })
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let mut g = Graph::new();
        let params = self.load(&mut g);
        let xv = g.constant(x.clone());
        let h = self.shape.encode(&mut g, &params, xv)?;
        Ok(g.value(h).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let mut g = Graph::new();
        let params = self.load(&mut g);
        let xv = g.constant(x.clone());
        let y = self.shape.predict(&mut g, &params, xv)?;
        Ok(g.value(y).clone())
    }
}

pub(crate) fn step_tensors(
    tensors: &[Tensor],
    update: &[Tensor],
    rate: f64,
) -> Result<Vec<Tensor>, NetError> {
    if update.len() != tensors.len() {
        return Err(NetError::Shape {
            what: "update tensor count",
            expected: tensors.len().to_string(),
            found: update.len().to_string(),
        });
    }
    tensors
        .iter()
        .zip(update)
        .map(|(t, u)| {
            if t.shape() != u.shape() {
                return Err(NetError::Shape {
                    what: "update tensor",
                    expected: format!("{:?}", t.shape()),
                    found: format!("{:?}", u.shape()),
                });
            }
            let next = t.zip_map(u, |p, d| p - rate * d);
            if next.is_finite() {
                Ok(next)
            } else {
                Err(NetError::NonFinite("parameter update"))
            }
        })
        .collect()
}

/// Layout of the referee: `(embedding ⊕ relative performance) -> hidden ReLU -> 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefereeShape {
    pub embedding_dim: usize,
    pub hidden: usize,
}

impl RefereeShape {
    pub fn new(embedding_dim: usize, hidden: usize) -> Result<Self, NetError> {
        if embedding_dim == 0 || hidden == 0 {
            return Err(NetError::Invalid(
                "referee dimensions must be positive".into(),
            ));
        }
        Ok(Self {
            embedding_dim,
            hidden,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.embedding_dim + 1
    }

    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        vec![
            ("referee.0.weight".into(), (self.input_dim(), self.hidden)),
            ("referee.0.bias".into(), (1, self.hidden)),
            ("referee.1.weight".into(), (self.hidden, 1)),
            ("referee.1.bias".into(), (1, 1)),
        ]
    }

    /// Fairness factor for one location: `summary` is the `1 x embedding_dim`
    /// pooled embedding and `relative` the `1 x 1` value `m_i - M̂`.
    pub fn factor(
        &self,
        g: &mut Graph,
        params: &[Var],
        summary: Var,
        relative: Var,
    ) -> Result<Var, NetError> {
        check_vars(g, &self.layout(), params, "referee parameter")?;
        if g.shape(summary) != (1, self.embedding_dim) {
            return Err(NetError::Shape {
                what: "referee embedding input",
                expected: format!("(1, {})", self.embedding_dim),
                found: format!("{:?}", g.shape(summary)),
            });
        }
        if g.shape(relative) != (1, 1) {
            return Err(NetError::Shape {
                what: "referee performance input",
                expected: "(1, 1)".into(),
                found: format!("{:?}", g.shape(relative)),
            });
        }
        if !g.value(summary).is_finite() || !g.value(relative).is_finite() {
            return Err(NetError::NonFinite("referee input"));
        }
        let input = g.concat_cols(summary, relative);
        let z = g.matmul(input, params[0]);
        let z = g.add(z, params[1]);
        let h = g.relu(z);
        let out = g.matmul(h, params[2]);
        Ok(g.add(out, params[3]))
    }
}

fn check_vars(
    g: &Graph,
    layout: &[(String, (usize, usize))],
    params: &[Var],
    what: &'static str,
) -> Result<(), NetError> {
    if params.len() != layout.len() {
        return Err(NetError::Shape {
            what,
            expected: format!("{} tensors", layout.len()),
            found: params.len().to_string(),
        });
    }
    for ((name, shape), &p) in layout.iter().zip(params) {
        if g.shape(p) != *shape {
            return Err(NetError::Shape {
                what,
                expected: format!("{name} {shape:?}"),
                found: format!("{:?}", g.shape(p)),
            });
        }
    }
    Ok(())
}

/// Referee parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaRefParams {
    shape: RefereeShape,
    tensors: Vec<Tensor>,
}

impl MetaRefParams {
    pub fn init<R: Rng + ?Sized>(shape: RefereeShape, rng: &mut R) -> Self {
        let tensors = init_layout(&shape.layout(), rng);
        Self { shape, tensors }
    }

    pub fn zeros(shape: RefereeShape) -> Self {
        let tensors = shape
            .layout()
            .into_iter()
            .map(|(_, (r, c))| Tensor::zeros(r, c))
            .collect();
        Self { shape, tensors }
    }

    pub fn from_tensors(shape: RefereeShape, tensors: Vec<Tensor>) -> Result<Self, NetError> {
        check_tensors(&shape.layout(), &tensors, "referee parameters")?;
        Ok(Self { shape, tensors })
    }

    pub fn shape(&self) -> &RefereeShape {
        &self.shape
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn load(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    pub fn stepped(&self, update: &[Tensor], rate: f64) -> Result<Self, NetError> {
        let tensors = step_tensors(&self.tensors, update, rate)?;
        Ok(Self {
            shape: self.shape,
            tensors,
        })
    }

    /// Plain evaluation of the fairness factor.
    pub fn factor(&self, summary: &[f64], relative: f64) -> Result<f64, NetError> {
        if !relative.is_finite() || summary.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite("referee input"));
        }
        let mut g = Graph::new();
        let params = self.load(&mut g);
        let s = g.constant(Tensor::row_vector(summary));
        let r = g.scalar(relative);
        let eta = self.shape.factor(&mut g, &params, s, r)?;
        Ok(g.item(eta))
    }
}
