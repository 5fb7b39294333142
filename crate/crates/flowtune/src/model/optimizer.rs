//! SGD and Adam over the flat parameter vector, with an explicit ascent or
//! descent direction so RL objectives and losses share one code path.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `θ ← θ + η·g` (reward objectives).
    Ascent,
    /// `θ ← θ − η·g` (losses).
    Descent,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub direction: Direction,
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
}

impl OptimizerState {
    pub fn sgd(lr: f64, direction: Direction) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            direction,
            m: Vec::new(),
            v: Vec::new(),
            step_count: 0,
        }
    }

    pub fn adam(lr: f64, direction: Direction) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            direction,
            m: Vec::new(),
            v: Vec::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() {
            return Err(Error::Domain(
                "optimizer gradient length mismatch".into(),
            ));
        }
        let sign = match self.direction {
            Direction::Ascent => 1.0,
            Direction::Descent => -1.0,
        };
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p += sign * self.lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.len() != params.len() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                }
                let t = self.step_count as f64;
                let bc1 = 1.0 - beta1.powf(t);
                let bc2 = 1.0 - beta2.powf(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] += sign * self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Serialized moments for checkpointing.
    pub(crate) fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub(crate) fn restore_moments(&mut self, m: Vec<f64>, v: Vec<f64>, step_count: u64) {
        self.m = m;
        self.v = v;
        self.step_count = step_count;
    }

    pub fn descriptor(&self) -> String {
        let mut out = String::new();
        match self.kind {
            OptimizerKind::Sgd => out.push_str("kind=sgd\n"),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                out.push_str("kind=adam\n");
                out.push_str(&format!("beta1={beta1}\nbeta2={beta2}\nadam_eps={eps}\n"));
            }
        }
        let dir = match self.direction {
            Direction::Ascent => "ascent",
            Direction::Descent => "descent",
        };
        out.push_str(&format!(
            "lr={}\ndirection={dir}\nsteps={}\n",
            self.lr, self.step_count
        ));
        out
    }

    pub(crate) fn from_descriptor(text: &str, m: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let fields = crate::model::parse_descriptor(text)?;
        let lr: f64 = crate::model::descriptor_field(&fields, "lr")?;
        let steps: u64 = crate::model::descriptor_field(&fields, "steps")?;
        let direction = match fields.get("direction").map(String::as_str) {
            Some("ascent") => Direction::Ascent,
            Some("descent") => Direction::Descent,
            other => {
                return Err(Error::Checkpoint(format!(
                    "bad optimizer direction {other:?}"
                )))
            }
        };
        let kind = match fields.get("kind").map(String::as_str) {
            Some("sgd") => OptimizerKind::Sgd,
            Some("adam") => OptimizerKind::Adam {
                beta1: crate::model::descriptor_field(&fields, "beta1")?,
                beta2: crate::model::descriptor_field(&fields, "beta2")?,
                eps: crate::model::descriptor_field(&fields, "adam_eps")?,
            },
            other => return Err(Error::Checkpoint(format!("bad optimizer kind {other:?}"))),
        };
        let mut opt = Self {
            kind,
            lr,
            direction,
            m: Vec::new(),
            v: Vec::new(),
            step_count: 0,
        };
        opt.restore_moments(m, v, steps);
        Ok(opt)
    }
}
