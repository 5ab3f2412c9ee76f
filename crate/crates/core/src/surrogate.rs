//! Single-hidden-layer network replacing one stationary column section.
//!
//! Inputs are `(x_upper, y_lower, r)`: the liquid leaving the upper
//! aggregation stage, the vapor leaving the lower one, and the section's
//! liquid/vapor flow ratio. The output is the liquid composition entering the
//! lower aggregation stage. Compositions enter and leave through the logit
//! transform; every input is then normalized affinely.
//!
//! Parameter layout (`WeightVector`): for each hidden node the three input
//! weights, its bias and its output weight, followed by the output bias. The
//! five parameters of one node are contiguous, so a freshly added node owns
//! the block just before the output bias.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to compositions before the logit.
pub const EPS: f64 = 1e-9;
pub const N_INPUTS: usize = 3;
pub const PARAMS_PER_NODE: usize = N_INPUTS + 2;
const HEADER: &str = "surrogate-v1";

/// Logit of the clamped composition.
pub fn transform(x: f64) -> f64 {
    let c = x.clamp(EPS, 1.0 - EPS);
    (c / (1.0 - c)).ln()
}

/// Inverse of [`transform`] on the clamped range.
pub fn untransform(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// d transform / dx; zero where the clamp is active.
pub fn transform_slope(x: f64) -> f64 {
    if x <= EPS || x >= 1.0 - EPS {
        0.0
    } else {
        1.0 / (x * (1.0 - x))
    }
}

/// Affine normalization applied after the logit (compositions) or directly (flow ratio).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub center: [f64; N_INPUTS],
    pub half_range: [f64; N_INPUTS],
}

impl Default for InputScaling {
    fn default() -> Self {
        InputScaling {
            center: [0.0; N_INPUTS],
            half_range: [1.0; N_INPUTS],
        }
    }
}

impl InputScaling {
    /// Maps the given feature box (logit compositions, raw ratio) onto [-1, 1]^3.
    pub fn from_box(lo: [f64; N_INPUTS], hi: [f64; N_INPUTS]) -> Self {
        let mut s = InputScaling::default();
        for k in 0..N_INPUTS {
            s.center[k] = 0.5 * (lo[k] + hi[k]);
            let half = 0.5 * (hi[k] - lo[k]);
            s.half_range[k] = if half > 1e-12 { half } else { 1.0 };
        }
        s
    }
}

/// Unscaled features of a raw input: logit compositions and the raw ratio.
pub fn features(input: &[f64; N_INPUTS]) -> [f64; N_INPUTS] {
    [transform(input[0]), transform(input[1]), input[2]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenNode {
    pub weights: [f64; N_INPUTS],
    pub bias: f64,
    pub output_weight: f64,
}

impl HiddenNode {
    pub fn zero() -> Self {
        HiddenNode {
            weights: [0.0; N_INPUTS],
            bias: 0.0,
            output_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub section_id: usize,
    pub nodes: Vec<HiddenNode>,
    pub output_bias: f64,
    pub scaling: InputScaling,
}

impl SurrogateModel {
    /// Network whose output is `value` everywhere.
    pub fn constant(section_id: usize, value: f64, hidden_count: usize, scaling: InputScaling) -> Self {
        assert!(hidden_count >= 1, "a surrogate needs at least one hidden node");
        SurrogateModel {
            section_id,
            nodes: vec![HiddenNode::zero(); hidden_count],
            output_bias: transform(value),
            scaling,
        }
    }

    pub fn hidden_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_weights(&self) -> usize {
        PARAMS_PER_NODE * self.nodes.len() + 1
    }

    /// Normalized network input for a raw input.
    pub fn scaled_input(&self, input: &[f64; N_INPUTS]) -> [f64; N_INPUTS] {
        let f = features(input);
        let s = &self.scaling;
        [
            (f[0] - s.center[0]) / s.half_range[0],
            (f[1] - s.center[1]) / s.half_range[1],
            (f[2] - s.center[2]) / s.half_range[2],
        ]
    }

    /// Network output in the logit (scaled) space for a normalized input.
    pub fn forward_scaled(&self, z: &[f64; N_INPUTS]) -> f64 {
        self.nodes.iter().fold(self.output_bias, |acc, n| {
            let a = n.bias + n.weights[0] * z[0] + n.weights[1] * z[1] + n.weights[2] * z[2];
            acc + n.output_weight * a.tanh()
        })
    }

    /// Scaled output for a raw input.
    pub fn eval_scaled(&self, input: &[f64; N_INPUTS]) -> f64 {
        self.forward_scaled(&self.scaled_input(input))
    }

    /// Predicted liquid composition leaving the section.
    pub fn eval(&self, input: &[f64; N_INPUTS]) -> f64 {
        untransform(self.eval_scaled(input))
    }

    /// d eval / d (x_upper, y_lower, r) in unscaled spaces.
    pub fn input_jacobian(&self, input: &[f64; N_INPUTS]) -> [f64; N_INPUTS] {
        self.eval_with_input_jacobian(input).1
    }

    /// `eval` and `input_jacobian` in one pass over the hidden layer.
    pub fn eval_with_input_jacobian(&self, input: &[f64; N_INPUTS]) -> (f64, [f64; N_INPUTS]) {
        let z = self.scaled_input(input);
        let mut o = self.output_bias;
        let mut g = [0.0; N_INPUTS];
        for n in &self.nodes {
            let a = n.bias + n.weights[0] * z[0] + n.weights[1] * z[1] + n.weights[2] * z[2];
            let t = a.tanh();
            o += n.output_weight * t;
            let d = n.output_weight * (1.0 - t * t);
            for k in 0..N_INPUTS {
                g[k] += d * n.weights[k];
            }
        }
        let dz = self.scaled_input_slope(input);
        let y = untransform(o);
        let dy = y * (1.0 - y);
        for k in 0..N_INPUTS {
            g[k] *= dz[k] * dy;
        }
        (y, g)
    }

    /// d scaled input / d raw input, per component.
    pub fn scaled_input_slope(&self, input: &[f64; N_INPUTS]) -> [f64; N_INPUTS] {
        let s = &self.scaling;
        [
            transform_slope(input[0]) / s.half_range[0],
            transform_slope(input[1]) / s.half_range[1],
            1.0 / s.half_range[2],
        ]
    }

    /// d forward_scaled / d z.
    pub fn scaled_jacobian(&self, z: &[f64; N_INPUTS]) -> [f64; N_INPUTS] {
        let mut g = [0.0; N_INPUTS];
        for n in &self.nodes {
            let a = n.bias + n.weights[0] * z[0] + n.weights[1] * z[1] + n.weights[2] * z[2];
            let t = a.tanh();
            let d = n.output_weight * (1.0 - t * t);
            for k in 0..N_INPUTS {
                g[k] += d * n.weights[k];
            }
        }
        g
    }

    /// Gradient of the scaled output with respect to the weight vector, for a
    /// normalized input.
    pub fn weight_jacobian_scaled(&self, z: &[f64; N_INPUTS], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_weights());
        for (k, n) in self.nodes.iter().enumerate() {
            let a = n.bias + n.weights[0] * z[0] + n.weights[1] * z[1] + n.weights[2] * z[2];
            let t = a.tanh();
            let d = n.output_weight * (1.0 - t * t);
            let o = PARAMS_PER_NODE * k;
            out[o] = d * z[0];
            out[o + 1] = d * z[1];
            out[o + 2] = d * z[2];
            out[o + 3] = d;
            out[o + 4] = t;
        }
        out[self.n_weights() - 1] = 1.0;
    }

    /// Gradient of the scaled output with respect to the weight vector.
    pub fn weight_jacobian(&self, input: &[f64; N_INPUTS]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_weights()];
        self.weight_jacobian_scaled(&self.scaled_input(input), &mut out);
        out
    }

    pub fn weights(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.n_weights());
        for n in &self.nodes {
            w.extend_from_slice(&n.weights);
            w.push(n.bias);
            w.push(n.output_weight);
        }
        w.push(self.output_bias);
        w
    }

    pub fn set_weights(&mut self, w: &[f64]) {
        assert_eq!(w.len(), self.n_weights(), "weight vector length mismatch");
        for (k, n) in self.nodes.iter_mut().enumerate() {
            let b = &w[PARAMS_PER_NODE * k..PARAMS_PER_NODE * (k + 1)];
            n.weights.copy_from_slice(&b[..N_INPUTS]);
            n.bias = b[3];
            n.output_weight = b[4];
        }
        self.output_bias = w[w.len() - 1];
    }

    pub fn with_weights(&self, w: &[f64]) -> Self {
        let mut m = self.clone();
        m.set_weights(w);
        m
    }

    /// Appends a zero node; outputs are unchanged since its output weight is zero.
    pub fn add_node(&self, max_nodes: usize) -> Result<Self> {
        if self.nodes.len() >= max_nodes {
            return Err(Error::MaxNodes(max_nodes));
        }
        let mut m = self.clone();
        m.nodes.push(HiddenNode::zero());
        Ok(m)
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER} {} {}", self.section_id, self.nodes.len());
        let c = &self.scaling;
        let _ = writeln!(
            s,
            "scaling {} {} {} {} {} {}",
            c.center[0], c.center[1], c.center[2], c.half_range[0], c.half_range[1], c.half_range[2]
        );
        for n in &self.nodes {
            let _ = writeln!(
                s,
                "node {} {} {} {} {}",
                n.weights[0], n.weights[1], n.weights[2], n.bias, n.output_weight
            );
        }
        let _ = writeln!(s, "bias {}", self.output_bias);
        s
    }

    pub fn deserialize(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let parse_err = |line: usize, reason: &str| Error::Parse {
            line: line + 1,
            reason: reason.to_string(),
        };
        let (ln, header) = lines.next().ok_or_else(|| parse_err(0, "empty record"))?;
        let mut h = header.split_whitespace();
        match h.next() {
            Some(HEADER) => {}
            Some(v) if v.starts_with("surrogate-") => return Err(Error::Version(v.to_string())),
            _ => return Err(parse_err(ln, "missing header")),
        }
        let mut next_usize = |what: &str| -> Result<usize> {
            h.next()
                .ok_or_else(|| parse_err(ln, &format!("missing {what}")))?
                .parse()
                .map_err(|_| parse_err(ln, &format!("bad {what}")))
        };
        let section_id = next_usize("section id")?;
        let hidden = next_usize("hidden count")?;
        if hidden == 0 {
            return Err(parse_err(ln, "hidden count must be positive"));
        }

        let mut numbers = |tag: &str, count: usize| -> Result<Vec<f64>> {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| parse_err(usize::MAX - 1, &format!("truncated record, expected `{tag}`")))?;
            let mut it = line.split_whitespace();
            if it.next() != Some(tag) {
                return Err(parse_err(ln, &format!("expected `{tag}`")));
            }
            let vals = it
                .map(|t| t.parse::<f64>().map_err(|_| parse_err(ln, &format!("bad number `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != count {
                return Err(parse_err(ln, &format!("`{tag}` needs {count} values, found {}", vals.len())));
            }
            Ok(vals)
        };
        let sc = numbers("scaling", 6)?;
        let scaling = InputScaling {
            center: [sc[0], sc[1], sc[2]],
            half_range: [sc[3], sc[4], sc[5]],
        };
        let mut nodes = Vec::with_capacity(hidden);
        for _ in 0..hidden {
            let v = numbers("node", 5)?;
            nodes.push(HiddenNode {
                weights: [v[0], v[1], v[2]],
                bias: v[3],
                output_weight: v[4],
            });
        }
        let output_bias = numbers("bias", 1)?[0];
        Ok(SurrogateModel {
            section_id,
            nodes,
            output_bias,
            scaling,
        })
    }
}
