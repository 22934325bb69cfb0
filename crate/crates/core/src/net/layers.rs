//! Layer primitives with hand-written forward and backward passes.

use rand::Rng;

use super::tensor::Tensor;

/// 3x3 convolution, stride 1, zero "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(out, in, 3, 3)`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Valid `(output range start, end)` for a tap offset `d` over length `n`.
#[inline]
fn span(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self { in_channels, out_channels, weight: vec![0.0; out_channels * in_channels * 9], bias: vec![0.0; out_channels] }
    }

    /// He-uniform weights, zero bias.
    pub fn init(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let mut layer = Self::zeros(in_channels, out_channels);
        he_uniform(&mut layer.weight, in_channels * 9, rng);
        layer
    }

    #[inline]
    fn w(&self, o: usize, c: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_channels + c) * 3 + ky) * 3 + kx]
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        let (c_in, h, w) = input.chw();
        assert_eq!(c_in, self.in_channels, "conv input channels");
        let x = input.data();
        let mut out = vec![0.0; self.out_channels * h * w];
        for o in 0..self.out_channels {
            let plane = &mut out[o * h * w..(o + 1) * h * w];
            plane.iter_mut().for_each(|v| *v = self.bias[o]);
            for c in 0..c_in {
                let src = &x[c * h * w..(c + 1) * h * w];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(h, dy);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(w, dx);
                        let k = self.w(o, c, ky, kx);
                        if k == 0.0 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let dst = &mut plane[y * w + x0..y * w + x1];
                            let s = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
                            for (d, v) in dst.iter_mut().zip(s) {
                                *d += k * v;
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![self.out_channels, h, w], out).expect("conv output shape")
    }

    /// Accumulates parameter gradients into `dw`/`db` and returns the
    /// gradient with respect to `input`.
    pub fn backward(&self, input: &Tensor, grad_out: &Tensor, dw: &mut [f64], db: &mut [f64]) -> Tensor {
        let (c_in, h, w) = input.chw();
        let x = input.data();
        let g = grad_out.data();
        let mut gin = vec![0.0; c_in * h * w];
        for o in 0..self.out_channels {
            let gplane = &g[o * h * w..(o + 1) * h * w];
            db[o] += gplane.iter().sum::<f64>();
            for c in 0..c_in {
                let src = &x[c * h * w..(c + 1) * h * w];
                let gsrc = &mut gin[c * h * w..(c + 1) * h * w];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(h, dy);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(w, dx);
                        let k = self.w(o, c, ky, kx);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let go = &gplane[y * w + x0..y * w + x1];
                            let lo = sy * w + (x0 as isize + dx) as usize;
                            let hi = sy * w + (x1 as isize + dx) as usize;
                            for (gv, xv) in go.iter().zip(&src[lo..hi]) {
                                acc += gv * xv;
                            }
                            for (gi, gv) in gsrc[lo..hi].iter_mut().zip(go) {
                                *gi += k * gv;
                            }
                        }
                        dw[((o * c_in + c) * 3 + ky) * 3 + kx] += acc;
                    }
                }
            }
        }
        Tensor::new(vec![c_in, h, w], gin).expect("conv grad shape")
    }
}

/// Fully connected layer `y = W x + b`, `W` stored `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weight: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let mut layer = Self::zeros(inputs, outputs);
        he_uniform(&mut layer.weight, inputs, rng);
        layer
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.inputs, "dense input width");
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
        let mut gin = vec![0.0; self.inputs];
        for (o, &g) in grad_out.iter().enumerate() {
            db[o] += g;
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let drow = &mut dw[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                drow[i] += g * x[i];
                gin[i] += g * row[i];
            }
        }
        gin
    }
}

fn he_uniform(w: &mut [f64], fan_in: usize, rng: &mut impl Rng) {
    let limit = (6.0 / fan_in as f64).sqrt();
    for v in w {
        // Stored weights are kept representable in f32 (model file precision).
        *v = rng.random_range(-limit..limit) as f32 as f64;
    }
}

pub fn relu_in_place(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` where the ReLU output was not positive.
pub fn relu_backward(output: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling, stride 2 (odd trailing rows/columns dropped). Returns
/// the pooled tensor and the flat input index of each maximum (first
/// maximum wins ties).
pub fn maxpool2(input: &Tensor) -> (Tensor, Vec<usize>) {
    let (c, h, w) = input.chw();
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = ch * h * w + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ch * h * w + (2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (Tensor::new(vec![c, oh, ow], out).expect("pool shape"), arg)
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gin = Tensor::zeros(input_shape.to_vec());
    let g = gin.data_mut();
    for (&idx, &go) in argmax.iter().zip(grad_out.data()) {
        g[idx] += go;
    }
    gin
}

pub fn global_avg_pool(input: &Tensor) -> Vec<f64> {
    let (c, h, w) = input.chw();
    let n = (h * w) as f64;
    input.data().chunks_exact(h * w).take(c).map(|plane| plane.iter().sum::<f64>() / n).collect()
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &[f64]) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let n = (h * w) as f64;
    let mut data = Vec::with_capacity(c * h * w);
    for &g in grad_out {
        data.extend(std::iter::repeat_n(g / n, h * w));
    }
    Tensor::new(vec![c, h, w], data).expect("gap grad shape")
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_forward_backward() {
        let d = Dense { inputs: 2, outputs: 2, weight: vec![1.0, 2.0, -1.0, 0.5], bias: vec![0.1, -0.2] };
        assert_eq!(d.forward(&[1.0, 1.0]), vec![3.1, -0.7]);
        let (mut dw, mut db) = (vec![0.0; 4], vec![0.0; 2]);
        let gin = d.backward(&[1.0, 2.0], &[1.0, -1.0], &mut dw, &mut db);
        assert_eq!(gin, vec![2.0, 1.5]);
        assert_eq!(dw, vec![1.0, 2.0, -1.0, -2.0]);
        assert_eq!(db, vec![1.0, -1.0]);
    }

    #[test]
    fn pooling_routes_gradient_to_max() {
        let t = Tensor::new(vec![1, 2, 4], vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 9.0, 0.0]).unwrap();
        let (p, arg) = maxpool2(&t);
        assert_eq!(p.data(), &[5.0, 9.0]);
        let g = maxpool2_backward(t.shape(), &arg, &Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn gap_and_sigmoid() {
        let t = Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, -2.0, 2.0]).unwrap();
        assert_eq!(global_avg_pool(&t), vec![2.0, 0.0]);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn init_is_f32_representable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Conv2d::init(3, 4, &mut rng);
        assert!(c.weight.iter().all(|&w| (w as f32) as f64 == w));
        assert!(c.weight.iter().all(|&w| w.abs() <= (6.0f64 / 27.0).sqrt()));
    }
}
