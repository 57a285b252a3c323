use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    /// Output logits; the softmax is folded into the cross-entropy loss.
    Softmax,
}

impl Activation {
    pub(crate) fn apply(self, z: &mut [f64]) {
        if self == Activation::Relu {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }

    /// Multiplies `delta` by the activation derivative at pre-activation `z`.
    pub(crate) fn backprop(self, z: &[f64], delta: &mut [f64]) {
        if self == Activation::Relu {
            for (d, &zv) in delta.iter_mut().zip(z) {
                if zv <= 0.0 {
                    *d = 0.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    /// Fully connected; weights are row-major `[out_dim, in_dim]`.
    Dense { in_dim: usize, out_dim: usize },
    /// Valid (unpadded) 2-D convolution over a `[in_channels, height, width]`
    /// input; weights are `[out_channels, in_channels, k, k]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        in_height: usize,
        in_width: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense { in_dim, out_dim },
            activation,
        }
    }

    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        (in_height, in_width): (usize, usize),
        activation: Activation,
    ) -> Self {
        Self {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                stride,
                in_height,
                in_width,
            },
            activation,
        }
    }

    pub fn input_len(&self) -> usize {
        self.kind.input_len()
    }

    pub fn output_len(&self) -> usize {
        self.kind.output_len()
    }

    pub(crate) fn validate(&self) -> Result<(), String> {
        match self.kind {
            LayerKind::Dense { in_dim, out_dim } => {
                if in_dim == 0 || out_dim == 0 {
                    return Err(format!("dense dimensions must be >= 1, got {in_dim}x{out_dim}"));
                }
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                stride,
                in_height,
                in_width,
            } => {
                if [in_channels, out_channels, kernel_size, stride, in_height, in_width].contains(&0) {
                    return Err("conv2d dimensions must be >= 1".into());
                }
                if kernel_size > in_height || kernel_size > in_width {
                    return Err(format!("kernel {kernel_size} larger than input {in_height}x{in_width}"));
                }
            }
        }
        Ok(())
    }
}

impl LayerKind {
    pub fn tag(&self) -> u32 {
        match self {
            LayerKind::Dense { .. } => 0,
            LayerKind::Conv2d { .. } => 1,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Dense { in_dim, out_dim } => vec![out_dim, in_dim],
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                ..
            } => vec![out_channels, in_channels, kernel_size, kernel_size],
        }
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerKind::Dense { out_dim, .. } => out_dim,
            LayerKind::Conv2d { out_channels, .. } => out_channels,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { in_dim, .. } => in_dim,
            LayerKind::Conv2d {
                in_channels,
                kernel_size,
                ..
            } => in_channels * kernel_size * kernel_size,
        }
    }

    pub fn input_len(&self) -> usize {
        match *self {
            LayerKind::Dense { in_dim, .. } => in_dim,
            LayerKind::Conv2d {
                in_channels,
                in_height,
                in_width,
                ..
            } => in_channels * in_height * in_width,
        }
    }

    pub fn output_len(&self) -> usize {
        match *self {
            LayerKind::Dense { out_dim, .. } => out_dim,
            LayerKind::Conv2d { out_channels, .. } => {
                let (oh, ow) = self.output_hw();
                out_channels * oh * ow
            }
        }
    }

    fn output_hw(&self) -> (usize, usize) {
        match *self {
            LayerKind::Dense { .. } => (1, 1),
            LayerKind::Conv2d {
                kernel_size,
                stride,
                in_height,
                in_width,
                ..
            } => (
                (in_height.saturating_sub(kernel_size)) / stride + 1,
                (in_width.saturating_sub(kernel_size)) / stride + 1,
            ),
        }
    }

    /// Pre-activation output for `n` rows of `input`.
    pub(crate) fn forward(&self, weights: &[f64], bias: &[f64], input: &[f64], n: usize) -> Vec<f64> {
        let (in_len, out_len) = (self.input_len(), self.output_len());
        let mut out = vec![0.0; n * out_len];
        match *self {
            LayerKind::Dense { in_dim, out_dim } => {
                for (x, z) in input.chunks(in_dim).zip(out.chunks_mut(out_dim)) {
                    for (o, zo) in z.iter_mut().enumerate() {
                        let row = &weights[o * in_dim..(o + 1) * in_dim];
                        *zo = bias[o] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
                    }
                }
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_size: k,
                stride,
                in_height: h,
                in_width: w,
            } => {
                let (oh, ow) = self.output_hw();
                for (x, z) in input.chunks(in_len).zip(out.chunks_mut(out_len)) {
                    for oc in 0..out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bias[oc];
                                for ic in 0..in_channels {
                                    for ky in 0..k {
                                        let xrow = (ic * h + oy * stride + ky) * w + ox * stride;
                                        let wrow = ((oc * in_channels + ic) * k + ky) * k;
                                        for kx in 0..k {
                                            acc += weights[wrow + kx] * x[xrow + kx];
                                        }
                                    }
                                }
                                z[(oc * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns (weight grads, bias grads, input grads). Input grads are only
    /// computed when `want_input` is set.
    pub(crate) fn backward(
        &self,
        weights: &[f64],
        input: &[f64],
        delta: &[f64],
        n: usize,
        want_input: bool,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (in_len, out_len) = (self.input_len(), self.output_len());
        let mut gw = vec![0.0; weights.len()];
        let mut gb = vec![0.0; self.bias_len()];
        let mut dx = if want_input { vec![0.0; n * in_len] } else { Vec::new() };
        match *self {
            LayerKind::Dense { in_dim, out_dim } => {
                for b in 0..n {
                    let x = &input[b * in_dim..(b + 1) * in_dim];
                    let d = &delta[b * out_dim..(b + 1) * out_dim];
                    for (o, &dv) in d.iter().enumerate() {
                        if dv == 0.0 {
                            continue;
                        }
                        gb[o] += dv;
                        let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
                        for (g, &xi) in grow.iter_mut().zip(x) {
                            *g += dv * xi;
                        }
                        if want_input {
                            let row = &weights[o * in_dim..(o + 1) * in_dim];
                            let dxr = &mut dx[b * in_dim..(b + 1) * in_dim];
                            for (dxi, &wv) in dxr.iter_mut().zip(row) {
                                *dxi += dv * wv;
                            }
                        }
                    }
                }
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_size: k,
                stride,
                in_height: h,
                in_width: w,
            } => {
                let (oh, ow) = self.output_hw();
                for b in 0..n {
                    let x = &input[b * in_len..(b + 1) * in_len];
                    let d = &delta[b * out_len..(b + 1) * out_len];
                    for oc in 0..out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let dv = d[(oc * oh + oy) * ow + ox];
                                if dv == 0.0 {
                                    continue;
                                }
                                gb[oc] += dv;
                                for ic in 0..in_channels {
                                    for ky in 0..k {
                                        let xrow = (ic * h + oy * stride + ky) * w + ox * stride;
                                        let wrow = ((oc * in_channels + ic) * k + ky) * k;
                                        for kx in 0..k {
                                            gw[wrow + kx] += dv * x[xrow + kx];
                                            if want_input {
                                                dx[b * in_len + xrow + kx] += dv * weights[wrow + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (gw, gb, dx)
    }
}
