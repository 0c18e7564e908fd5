//! Meta-Kernel: a 5x5 convolution-like operator whose per-neighbor weights
//! come from a shared perceptron applied to relative geometry.
//!
//! For center pixel `i` and neighbor `j` (row-major over the window):
//!
//! ```text
//! rel_j = (r_j - r_i, x_j - x_i, y_j - y_i, z_j - z_i)
//! w_j   = mlp(rel_j)                      (Cval weights)
//! m_j   = w_j * values_j                  (elementwise)
//! out_i = A . concat(m_0 .. m_24) + b     (1x1 aggregation)
//! ```
//!
//! Masked or out-of-image neighbors contribute a zero relative vector and
//! zero values, so their modulated slot is exactly zero.

use rayon::prelude::*;

use crate::tensor_ops::{Activation, DenseLayerGrad, DensePerceptron, FeatureMap, SeededInit, TensorError};

pub const WINDOW: usize = 5;
pub const RADIUS: isize = (WINDOW / 2) as isize;
pub const NEIGHBORS: usize = WINDOW * WINDOW;
pub const GEOMETRY_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct MetaKernelParams {
    pub weight_mlp: DensePerceptron,
    /// `out_channels x (25 * Cval)` row-major.
    pub aggregator_weight: Vec<f64>,
    pub aggregator_bias: Vec<f64>,
    pub out_channels: usize,
}

impl MetaKernelParams {
    pub fn new(
        weight_mlp: DensePerceptron,
        aggregator_weight: Vec<f64>,
        aggregator_bias: Vec<f64>,
    ) -> Result<Self, TensorError> {
        if weight_mlp.input_dim() != GEOMETRY_CHANNELS {
            return Err(TensorError::Shape(format!(
                "weight perceptron takes {} inputs, expected {GEOMETRY_CHANNELS}",
                weight_mlp.input_dim()
            )));
        }
        let fan_in = NEIGHBORS * weight_mlp.output_dim();
        let out_channels = aggregator_bias.len();
        if aggregator_weight.len() != out_channels * fan_in {
            return Err(TensorError::Shape(format!(
                "aggregator has {} weights, expected {out_channels} x {fan_in}",
                aggregator_weight.len()
            )));
        }
        Ok(Self {
            weight_mlp,
            aggregator_weight,
            aggregator_bias,
            out_channels,
        })
    }

    /// `4 -> hidden -> cval` perceptron (relu, then linear) and a
    /// He-initialized aggregator with zero bias.
    pub fn seeded(cval: usize, hidden: usize, out_channels: usize, init: &mut SeededInit) -> Self {
        let mlp = DensePerceptron::seeded(
            &[GEOMETRY_CHANNELS, hidden, cval],
            &[Activation::Relu, Activation::Identity],
            init,
        );
        let fan_in = NEIGHBORS * cval;
        let w = init.he(out_channels * fan_in, fan_in);
        Self::new(mlp, w, vec![0.0; out_channels]).expect("seeded shapes chain")
    }

    pub fn value_channels(&self) -> usize {
        self.weight_mlp.output_dim()
    }

    fn fan_in(&self) -> usize {
        NEIGHBORS * self.value_channels()
    }

    /// All parameters in a fixed order: perceptron layers (weight, bias),
    /// then aggregator weight and bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &self.weight_mlp.layers {
            v.extend_from_slice(&l.weight);
            v.extend_from_slice(&l.bias);
        }
        v.extend_from_slice(&self.aggregator_weight);
        v.extend_from_slice(&self.aggregator_bias);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for l in &mut self.weight_mlp.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|w| *w = it.next().unwrap());
        }
        self.aggregator_weight
            .iter_mut()
            .chain(self.aggregator_bias.iter_mut())
            .for_each(|w| *w = it.next().unwrap());
        assert!(it.next().is_none(), "flat parameter vector too long");
    }

    pub fn num_params(&self) -> usize {
        self.weight_mlp
            .layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum::<usize>()
            + self.aggregator_weight.len()
            + self.aggregator_bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaKernelInput {
    /// `(r, x, y, z)` planes.
    pub geometry: FeatureMap,
    pub values: FeatureMap,
    pub mask: Vec<bool>,
}

impl MetaKernelInput {
    fn validate(&self, params: &MetaKernelParams) -> Result<(), TensorError> {
        let (gc, h, w) = self.geometry.shape();
        if gc != GEOMETRY_CHANNELS {
            return Err(TensorError::Shape(format!("geometry has {gc} channels, expected 4")));
        }
        if (self.values.height, self.values.width) != (h, w) || self.mask.len() != h * w {
            return Err(TensorError::Shape("geometry, values and mask disagree on size".into()));
        }
        if self.values.channels != params.value_channels() {
            return Err(TensorError::Shape(format!(
                "values have {} channels, weight perceptron emits {}",
                self.values.channels,
                params.value_channels()
            )));
        }
        if !self.geometry.is_finite() {
            return Err(TensorError::NonFinite("geometry".into()));
        }
        Ok(())
    }

    fn neighbor(&self, y: usize, x: usize, slot: usize) -> Option<usize> {
        let (h, w) = (self.values.height as isize, self.values.width as isize);
        let ny = y as isize + slot as isize / WINDOW as isize - RADIUS;
        let nx = x as isize + slot as isize % WINDOW as isize - RADIUS;
        if ny < 0 || nx < 0 || ny >= h || nx >= w {
            return None;
        }
        let j = (ny * w + nx) as usize;
        self.mask[j].then_some(j)
    }

    fn relative(&self, i: usize, j: Option<usize>, out: &mut [f64; 4]) {
        let n = self.geometry.plane_len();
        match j {
            Some(j) => {
                for (c, o) in out.iter_mut().enumerate() {
                    *o = self.geometry.data[c * n + j] - self.geometry.data[c * n + i];
                }
            }
            None => *out = [0.0; 4],
        }
    }
}

/// Weight vectors `w_j` of all 25 window slots around pixel `i`,
/// concatenated in window order.
pub fn neighbor_weights(input: &MetaKernelInput, params: &MetaKernelParams, pixel: usize) -> Vec<f64> {
    let w = input.values.width;
    let (y, x) = (pixel / w, pixel % w);
    let mut rel = [0.0; 4];
    let (mut out, mut scratch) = (Vec::new(), Vec::new());
    let mut all = Vec::with_capacity(params.fan_in());
    for slot in 0..NEIGHBORS {
        input.relative(pixel, input.neighbor(y, x, slot), &mut rel);
        params.weight_mlp.forward_into(&rel, &mut out, &mut scratch);
        all.extend_from_slice(&out);
    }
    all
}

pub fn meta_kernel_forward(
    input: &MetaKernelInput,
    params: &MetaKernelParams,
) -> Result<FeatureMap, TensorError> {
    input.validate(params)?;
    let (h, w) = (input.values.height, input.values.width);
    let n = h * w;
    let cval = params.value_channels();
    let cout = params.out_channels;
    let fan_in = params.fan_in();

    // Pixel-major accumulation, transposed into channel-major afterwards.
    let mut pixel_major = vec![0.0; n * cout];
    pixel_major
        .par_chunks_mut(w * cout)
        .enumerate()
        .for_each(|(y, row_out)| {
            let mut concat = vec![0.0; fan_in];
            let mut rel = [0.0; 4];
            let (mut wv, mut scratch) = (Vec::with_capacity(cval), Vec::new());
            for x in 0..w {
                let i = y * w + x;
                for slot in 0..NEIGHBORS {
                    let dst = &mut concat[slot * cval..(slot + 1) * cval];
                    match input.neighbor(y, x, slot) {
                        Some(j) => {
                            input.relative(i, Some(j), &mut rel);
                            params.weight_mlp.forward_into(&rel, &mut wv, &mut scratch);
                            for (c, d) in dst.iter_mut().enumerate() {
                                *d = wv[c] * input.values.data[c * n + j];
                            }
                        }
                        None => dst.fill(0.0),
                    }
                }
                let out = &mut row_out[x * cout..(x + 1) * cout];
                for (o, slot) in out.iter_mut().enumerate() {
                    let a = &params.aggregator_weight[o * fan_in..(o + 1) * fan_in];
                    *slot = params.aggregator_bias[o]
                        + a.iter().zip(&concat).map(|(p, q)| p * q).sum::<f64>();
                }
            }
        });

    let mut out = FeatureMap::zeros(cout, h, w);
    for i in 0..n {
        for o in 0..cout {
            out.data[o * n + i] = pixel_major[i * cout + o];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaKernelGrads {
    pub weight_mlp: Vec<DenseLayerGrad>,
    pub aggregator_weight: Vec<f64>,
    pub aggregator_bias: Vec<f64>,
}

impl MetaKernelGrads {
    /// Same ordering as [`MetaKernelParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &self.weight_mlp {
            v.extend_from_slice(&l.weight);
            v.extend_from_slice(&l.bias);
        }
        v.extend_from_slice(&self.aggregator_weight);
        v.extend_from_slice(&self.aggregator_bias);
        v
    }
}

/// Exact gradients of the forward pass with respect to every parameter and
/// to the value channels; geometry is treated as a constant input.
/// Accumulation runs pixel by pixel in row-major order.
pub fn meta_kernel_backward(
    input: &MetaKernelInput,
    params: &MetaKernelParams,
    upstream: &FeatureMap,
) -> Result<(MetaKernelGrads, FeatureMap), TensorError> {
    input.validate(params)?;
    let (h, w) = (input.values.height, input.values.width);
    let n = h * w;
    let cval = params.value_channels();
    let cout = params.out_channels;
    let fan_in = params.fan_in();
    if upstream.shape() != (cout, h, w) {
        return Err(TensorError::Shape(format!(
            "upstream gradient {:?}, forward output is {:?}",
            upstream.shape(),
            (cout, h, w)
        )));
    }

    let mut grads = MetaKernelGrads {
        weight_mlp: params.weight_mlp.zero_grads(),
        aggregator_weight: vec![0.0; cout * fan_in],
        aggregator_bias: vec![0.0; cout],
    };
    let mut grad_values = FeatureMap::zeros(cval, h, w);
    let mut rel = [0.0; 4];
    let mut traces: Vec<Option<Vec<Vec<f64>>>> = vec![None; NEIGHBORS];
    let mut concat = vec![0.0; fan_in];
    let mut grad_concat = vec![0.0; fan_in];

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for slot in 0..NEIGHBORS {
                let dst = &mut concat[slot * cval..(slot + 1) * cval];
                traces[slot] = input.neighbor(y, x, slot).map(|j| {
                    input.relative(i, Some(j), &mut rel);
                    let trace = params.weight_mlp.forward_trace(&rel);
                    let wv = trace.last().unwrap();
                    for c in 0..cval {
                        dst[c] = wv[c] * input.values.data[c * n + j];
                    }
                    trace
                });
                if traces[slot].is_none() {
                    dst.fill(0.0);
                }
            }

            grad_concat.fill(0.0);
            for o in 0..cout {
                let g = upstream.data[o * n + i];
                if g == 0.0 {
                    continue;
                }
                grads.aggregator_bias[o] += g;
                let row = o * fan_in;
                for k in 0..fan_in {
                    grads.aggregator_weight[row + k] += g * concat[k];
                    grad_concat[k] += g * params.aggregator_weight[row + k];
                }
            }

            for slot in 0..NEIGHBORS {
                let (Some(trace), Some(j)) = (&traces[slot], input.neighbor(y, x, slot)) else {
                    continue;
                };
                let wv = trace.last().unwrap();
                let gm = &grad_concat[slot * cval..(slot + 1) * cval];
                let mut grad_w = vec![0.0; cval];
                for c in 0..cval {
                    grad_values.data[c * n + j] += gm[c] * wv[c];
                    grad_w[c] = gm[c] * input.values.data[c * n + j];
                }
                params.weight_mlp.backward(trace, &grad_w, &mut grads.weight_mlp);
            }
        }
    }
    Ok((grads, grad_values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_ops::DenseLayer;

    /// Perceptron whose output is all ones for any input.
    fn ones_mlp(cval: usize) -> DensePerceptron {
        DensePerceptron::new(vec![DenseLayer {
            inputs: 4,
            outputs: cval,
            weight: vec![0.0; 4 * cval],
            bias: vec![1.0; cval],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    fn window_sum_params() -> MetaKernelParams {
        MetaKernelParams::new(ones_mlp(1), vec![1.0; NEIGHBORS], vec![0.0]).unwrap()
    }

    fn constant_input(h: usize, w: usize, v: f64, mask: Vec<bool>) -> MetaKernelInput {
        MetaKernelInput {
            geometry: FeatureMap::filled(4, h, w, 1.0),
            values: FeatureMap::filled(1, h, w, v),
            mask,
        }
    }

    #[test]
    fn unit_configuration_is_a_window_sum() {
        let input = constant_input(7, 7, 2.0, vec![true; 49]);
        let out = meta_kernel_forward(&input, &window_sum_params()).unwrap();
        assert_eq!(out.at(0, 3, 3), 25.0 * 2.0);
        assert_eq!(out.at(0, 0, 0), 9.0 * 2.0);
    }

    #[test]
    fn isolated_pixel_sees_only_itself() {
        let mut mask = vec![false; 49];
        mask[24] = true;
        let mut input = constant_input(7, 7, 0.0, mask);
        input.values.data[24] = 3.5;
        let out = meta_kernel_forward(&input, &window_sum_params()).unwrap();
        assert_eq!(out.at(0, 3, 3), 3.5);
    }

    #[test]
    fn constant_geometry_gives_identical_weights() {
        let mut init = SeededInit::new(5);
        let mut params = MetaKernelParams::seeded(3, 8, 2, &mut init);
        params.weight_mlp.layers[0].bias = init.uniform(8, 1.0);
        let input = MetaKernelInput {
            geometry: FeatureMap::filled(4, 6, 6, 2.0),
            values: FeatureMap::filled(3, 6, 6, 1.0),
            mask: vec![true; 36],
        };
        let at_zero = crate::tensor_ops::perceptron_forward(&params.weight_mlp, &[0.0; 4]).unwrap();
        let all = neighbor_weights(&input, &params, 14);
        for slot in all.chunks(3) {
            assert_eq!(slot, &at_zero[..]);
        }
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let params = window_sum_params();
        let mut input = constant_input(4, 4, 1.0, vec![true; 16]);
        input.mask.pop();
        assert!(matches!(meta_kernel_forward(&input, &params), Err(TensorError::Shape(_))));
        let mut input = constant_input(4, 4, 1.0, vec![true; 16]);
        input.geometry.data[3] = f64::NAN;
        assert!(matches!(meta_kernel_forward(&input, &params), Err(TensorError::NonFinite(_))));
        let input = constant_input(4, 4, 1.0, vec![true; 16]);
        let bad = FeatureMap::zeros(2, 4, 4);
        assert!(meta_kernel_backward(&input, &params, &bad).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut init = SeededInit::new(9);
        let params = MetaKernelParams::seeded(2, 6, 3, &mut init);
        let input = MetaKernelInput {
            geometry: FeatureMap::from_vec(4, 4, 4, init.uniform(64, 1.0)).unwrap(),
            values: FeatureMap::from_vec(2, 4, 4, init.uniform(32, 1.0)).unwrap(),
            mask: vec![true; 16],
        };
        let (g, gv) = meta_kernel_backward(&input, &params, &FeatureMap::zeros(3, 4, 4)).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        assert!(gv.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_is_upstream_sum() {
        let mut init = SeededInit::new(10);
        let params = MetaKernelParams::seeded(2, 6, 3, &mut init);
        let input = MetaKernelInput {
            geometry: FeatureMap::from_vec(4, 4, 4, init.uniform(64, 1.0)).unwrap(),
            values: FeatureMap::from_vec(2, 4, 4, init.uniform(32, 1.0)).unwrap(),
            mask: vec![true; 16],
        };
        let up = FeatureMap::from_vec(3, 4, 4, init.uniform(48, 1.0)).unwrap();
        let (g, _) = meta_kernel_backward(&input, &params, &up).unwrap();
        for o in 0..3 {
            let s: f64 = up.channel(o).iter().sum();
            assert!((g.aggregator_bias[o] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_parameter_round_trip() {
        let mut init = SeededInit::new(2);
        let mut p = MetaKernelParams::seeded(9, 16, 4, &mut init);
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.num_params());
        let doubled: Vec<f64> = flat.iter().map(|v| 2.0 * v).collect();
        p.set_flat(&doubled);
        assert_eq!(p.to_flat(), doubled);
    }
}
