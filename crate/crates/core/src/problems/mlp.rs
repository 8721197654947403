use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Problem, ProblemError};

pub const MAX_PARAMETERS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpSpec {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub samples: usize,
    /// Regress onto all-zero targets instead of a random teacher network.
    pub zero_targets: bool,
}

impl Default for MlpSpec {
    fn default() -> Self {
        MlpSpec {
            inputs: 8,
            hidden: 16,
            outputs: 2,
            samples: 1024,
            zero_targets: false,
        }
    }
}

impl MlpSpec {
    pub fn parameters(&self) -> usize {
        self.hidden * (self.inputs + 1) + self.outputs * (self.hidden + 1)
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        if self.inputs == 0 || self.hidden == 0 || self.outputs == 0 || self.samples == 0 {
            return Err(ProblemError::InvalidShape(format!(
                "layer sizes and sample count must be >= 1, got {}-{}-{} with {} samples",
                self.inputs, self.hidden, self.outputs, self.samples
            )));
        }
        if self.parameters() > MAX_PARAMETERS {
            return Err(ProblemError::InvalidShape(format!(
                "{} parameters exceed the limit of {MAX_PARAMETERS}",
                self.parameters()
            )));
        }
        Ok(())
    }

    pub fn build(&self, seed: u64) -> Result<TinyMlp, ProblemError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape {
            inputs: self.inputs,
            hidden: self.hidden,
            outputs: self.outputs,
        };
        let teacher = shape.random_params(&mut rng, 1.0);
        let initial = shape.random_params(&mut rng, 0.5);
        let mut xs = Vec::with_capacity(self.samples * self.inputs);
        let mut ys = Vec::with_capacity(self.samples * self.outputs);
        let mut hidden = vec![0.0; self.hidden];
        let mut out = vec![0.0; self.outputs];
        for _ in 0..self.samples {
            let x: Vec<f64> = (0..self.inputs).map(|_| rng.sample(StandardNormal)).collect();
            if self.zero_targets {
                ys.extend(std::iter::repeat_n(0.0, self.outputs));
            } else {
                shape.forward(&teacher, &x, &mut hidden, &mut out);
                ys.extend(out.iter().map(|y| y + 0.01 * rng.sample::<f64, _>(StandardNormal)));
            }
            xs.extend_from_slice(&x);
        }
        Ok(TinyMlp { shape, xs, ys, initial })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Shape {
    inputs: usize,
    hidden: usize,
    outputs: usize,
}

impl Shape {
    fn len(&self) -> usize {
        self.hidden * (self.inputs + 1) + self.outputs * (self.hidden + 1)
    }

    // Parameter layout: W1 (hidden x inputs, row major), b1, W2 (outputs x hidden), b2.
    fn w1(&self) -> std::ops::Range<usize> {
        0..self.hidden * self.inputs
    }

    fn b1(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.inputs;
        s..s + self.hidden
    }

    fn w2(&self) -> std::ops::Range<usize> {
        let s = self.hidden * (self.inputs + 1);
        s..s + self.outputs * self.hidden
    }

    fn b2(&self) -> std::ops::Range<usize> {
        let s = self.hidden * (self.inputs + 1) + self.outputs * self.hidden;
        s..s + self.outputs
    }

    fn random_params(&self, rng: &mut ChaCha8Rng, gain: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.len()];
        let s1 = gain / (self.inputs as f64).sqrt();
        let s2 = gain / (self.hidden as f64).sqrt();
        for v in &mut p[self.w1()] {
            *v = s1 * rng.sample::<f64, _>(StandardNormal);
        }
        for v in &mut p[self.w2()] {
            *v = s2 * rng.sample::<f64, _>(StandardNormal);
        }
        p
    }

    fn forward(&self, p: &[f64], x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        let (w1, b1, w2, b2) = (&p[self.w1()], &p[self.b1()], &p[self.w2()], &p[self.b2()]);
        for h in 0..self.hidden {
            let row = &w1[h * self.inputs..(h + 1) * self.inputs];
            let z: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b1[h];
            hidden[h] = z.tanh();
        }
        for o in 0..self.outputs {
            let row = &w2[o * self.hidden..(o + 1) * self.hidden];
            out[o] = row.iter().zip(hidden.iter()).map(|(a, b)| a * b).sum::<f64>() + b2[o];
        }
    }
}

/// One-hidden-layer tanh network with squared loss
/// `f_e(w) = 1/2 ||net_w(x_e) - y_e||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyMlp {
    shape: Shape,
    xs: Vec<f64>,
    ys: Vec<f64>,
    initial: Vec<f64>,
}

/// `layers` is `[inputs, hidden, outputs]`.
pub fn make_tiny_mlp(layers: [usize; 3], samples: usize, seed: u64) -> Result<TinyMlp, ProblemError> {
    MlpSpec {
        inputs: layers[0],
        hidden: layers[1],
        outputs: layers[2],
        samples,
        zero_targets: false,
    }
    .build(seed)
}

impl TinyMlp {
    pub fn parameters(&self) -> usize {
        self.shape.len()
    }

    fn sample(&self, e: usize) -> (&[f64], &[f64]) {
        let s = self.shape;
        (
            &self.xs[e * s.inputs..(e + 1) * s.inputs],
            &self.ys[e * s.outputs..(e + 1) * s.outputs],
        )
    }
}

impl Problem for TinyMlp {
    fn name(&self) -> &'static str {
        "tiny_mlp"
    }

    fn dim(&self) -> usize {
        self.shape.len()
    }

    fn num_samples(&self) -> usize {
        self.ys.len() / self.shape.outputs
    }

    fn initial_point(&self) -> Vec<f64> {
        self.initial.clone()
    }

    fn sample_loss(&self, sample: usize, w: &[f64]) -> f64 {
        let s = self.shape;
        let (x, y) = self.sample(sample);
        let mut hidden = vec![0.0; s.hidden];
        let mut out = vec![0.0; s.outputs];
        s.forward(w, x, &mut hidden, &mut out);
        out.iter().zip(y).map(|(o, t)| 0.5 * (o - t) * (o - t)).sum()
    }

    fn add_sample_gradient(&self, sample: usize, w: &[f64], grad: &mut [f64]) {
        let s = self.shape;
        let (x, y) = self.sample(sample);
        let mut hidden = vec![0.0; s.hidden];
        let mut out = vec![0.0; s.outputs];
        s.forward(w, x, &mut hidden, &mut out);
        let residual: Vec<f64> = out.iter().zip(y).map(|(o, t)| o - t).collect();

        let w2 = &w[s.w2()];
        let mut delta = vec![0.0; s.hidden];
        for (h, d) in delta.iter_mut().enumerate() {
            let back: f64 = (0..s.outputs).map(|o| w2[o * s.hidden + h] * residual[o]).sum();
            *d = back * (1.0 - hidden[h] * hidden[h]);
        }
        let (w1r, b1r, w2r, b2r) = (s.w1(), s.b1(), s.w2(), s.b2());
        for h in 0..s.hidden {
            for i in 0..s.inputs {
                grad[w1r.start + h * s.inputs + i] += delta[h] * x[i];
            }
            grad[b1r.start + h] += delta[h];
        }
        for o in 0..s.outputs {
            for h in 0..s.hidden {
                grad[w2r.start + o * s.hidden + h] += residual[o] * hidden[h];
            }
            grad[b2r.start + o] += residual[o];
        }
    }
}
