//! Plain-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use dsmr_core::loss::FeatureExtractor;
use dsmr_core::model::Model;
use dsmr_core::rng::SplitMix64;
use dsmr_core::tensor::Tensor;

/// NCHW image stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct Img {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Img {
    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        Self {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            data: t.data().to_vec(),
        }
    }

    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + i) * self.w + j]
    }

    fn map(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let plane = self.h * self.w;
        Self {
            data: self
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| f((i / plane) % self.c, v))
                .collect(),
            ..self.clone()
        }
    }
}

pub fn random_tensor(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Zero-padded cross-correlation, `(k - 1) / 2` rows and columns of padding
/// before and the remainder after.
pub fn conv(x: &Img, kernel: &Tensor<f64>, bias: &Tensor<f64>) -> Img {
    let ks = kernel.shape();
    let (co, ci, k) = (ks[0], ks[1], ks[2]);
    assert_eq!(ci, x.c);
    let before = (k as isize - 1) / 2;
    let kat = |o: usize, c: usize, u: usize, v: usize| kernel.data()[((o * ci + c) * k + u) * k + v];
    let mut data = Vec::with_capacity(x.n * co * x.h * x.w);
    for n in 0..x.n {
        for o in 0..co {
            for i in 0..x.h {
                for j in 0..x.w {
                    let mut acc = bias.data()[o];
                    for c in 0..ci {
                        for u in 0..k {
                            for v in 0..k {
                                let ii = i as isize + u as isize - before;
                                let jj = j as isize + v as isize - before;
                                if ii >= 0 && jj >= 0 && (ii as usize) < x.h && (jj as usize) < x.w {
                                    acc += x.at(n, c, ii as usize, jj as usize) * kat(o, c, u, v);
                                }
                            }
                        }
                    }
                    data.push(acc);
                }
            }
        }
    }
    Img { c: co, data, ..*x }
}

pub fn relu(x: &Img) -> Img {
    x.map(|_, v| if v > 0.0 { v } else { 0.0 })
}

pub fn prelu(x: &Img, slope: &[f64]) -> Img {
    x.map(|c, v| if v >= 0.0 { v } else { slope[c] * v })
}

pub fn maxpool(x: &Img) -> Img {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut data = Vec::new();
    for n in 0..x.n {
        for c in 0..x.c {
            for i in 0..h {
                for j in 0..w {
                    let mut m = f64::NEG_INFINITY;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        m = m.max(x.at(n, c, 2 * i + di, 2 * j + dj));
                    }
                    data.push(m);
                }
            }
        }
    }
    Img { h, w, data, ..*x }
}

pub fn upsample(x: &Img) -> Img {
    let mut data = Vec::new();
    for n in 0..x.n {
        for c in 0..x.c {
            for i in 0..2 * x.h {
                for j in 0..2 * x.w {
                    data.push(x.at(n, c, i / 2, j / 2));
                }
            }
        }
    }
    Img {
        h: 2 * x.h,
        w: 2 * x.w,
        data,
        ..*x
    }
}

pub fn add(a: &Img, b: &Img) -> Img {
    assert_eq!((a.n, a.c, a.h, a.w), (b.n, b.c, b.h, b.w));
    Img {
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        ..a.clone()
    }
}

/// The residual `f(x)`: encoder conv+PReLU levels with pooling, a
/// conv+PReLU bottleneck, decoder levels of upsample, conv+ReLU and an added
/// skip, then a linear head.
pub fn residual(model: &Model<f64>, x: &Img) -> Img {
    let p = |name: &str| model.param(name).unwrap_or_else(|| panic!("{name}"));
    let depth = model.config().depth;
    let mut skips = Vec::new();
    let mut h = x.clone();
    for k in 0..depth {
        let y = conv(&h, p(&format!("enc{k}.weight")), p(&format!("enc{k}.bias")));
        let y = prelu(&y, p(&format!("enc{k}.slope")).data());
        h = maxpool(&y);
        skips.push(y);
    }
    let y = conv(&h, p("bottleneck.weight"), p("bottleneck.bias"));
    h = prelu(&y, p("bottleneck.slope").data());
    for k in (0..depth).rev() {
        let up = upsample(&h);
        let y = relu(&conv(&up, p(&format!("dec{k}.weight")), p(&format!("dec{k}.bias"))));
        h = add(&y, &skips[k]);
    }
    conv(&h, p("head.weight"), p("head.bias"))
}

/// Taps of a VGG-style extractor: blocks of conv+ReLU separated by 2x2
/// pooling, single channel replicated to three.
pub fn taps(ex: &FeatureExtractor<f64>, x: &Img) -> Vec<Img> {
    let cfg = ex.config();
    let mut h = Img {
        c: cfg.in_channels,
        data: (0..x.n)
            .flat_map(|n| (0..cfg.in_channels).flat_map(move |_| (0..x.h * x.w).map(move |k| (n, k))))
            .map(|(n, k)| x.data[n * x.h * x.w + k])
            .collect(),
        ..x.clone()
    };
    let params = ex.params();
    let mut next = 0;
    let mut out = Vec::new();
    let last = *cfg.taps.last().unwrap();
    for (b, layers) in cfg.blocks.iter().enumerate() {
        if b > last.block {
            break;
        }
        if b > 0 {
            h = maxpool(&h);
        }
        for l in 0..layers.len() {
            if b == last.block && l > last.layer {
                break;
            }
            h = relu(&conv(&h, &params[next].1, &params[next + 1].1));
            next += 2;
            if cfg.taps.iter().any(|t| t.block == b && t.layer == l) {
                out.push(h.clone());
            }
        }
    }
    out
}

/// `λ Σ λ_i / N_i ‖φ_i(pred) − φ_i(target)‖₁`.
pub fn feature_loss(ex: &FeatureExtractor<f64>, pred: &Img, target: &Img, lambda: f64, lambda_i: &[f64]) -> f64 {
    let a = taps(ex, pred);
    let b = taps(ex, target);
    let mut total = 0.0;
    for ((fa, fb), li) in a.iter().zip(&b).zip(lambda_i) {
        let l1: f64 = fa.data.iter().zip(&fb.data).map(|(x, y)| (x - y).abs()).sum();
        total += li / fa.data.len() as f64 * l1;
    }
    lambda * total
}
