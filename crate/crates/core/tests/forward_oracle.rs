//! Straight-line f64 reimplementation of the toy U-shape forward pass,
//! compared against the tape forward at 32-bit.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srseg::autodiff::BnMode;
use srseg::{Model, ModelConfig, Tape, Tensor};

/// C×H×W feature map of one image.
#[derive(Clone)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Map {
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }
}

struct Params(HashMap<String, (Vec<usize>, Vec<f64>)>);

impl Params {
    fn get(&self, name: &str) -> &[f64] {
        &self.0.get(name).unwrap_or_else(|| panic!("missing {name}")).1
    }
    fn shape(&self, name: &str) -> &[usize] {
        &self.0[name].0
    }
    fn has(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }
}

fn conv(p: &Params, name: &str, x: &Map, stride: usize) -> Map {
    let s = p.shape(&format!("{name}.weight")).to_vec();
    let (o, k) = (s[0], s[2]);
    let w = p.get(&format!("{name}.weight"));
    let bias_name = format!("{name}.bias");
    let pad = k / 2;
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut v = vec![0.0; o * oh * ow];
    for oc in 0..o {
        let b = if p.has(&bias_name) { p.get(&bias_name)[oc] } else { 0.0 };
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ic in 0..x.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            acc += w[((oc * x.c + ic) * k + ky) * k + kx] * x.at(ic, iy as usize, ix as usize);
                        }
                    }
                }
                v[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Map { c: o, h: oh, w: ow, v }
}

fn bn_eval(p: &Params, name: &str, x: &Map) -> Map {
    let g = p.get(&format!("{name}.gamma"));
    let b = p.get(&format!("{name}.beta"));
    let m = p.get(&format!("{name}.running_mean"));
    let var = p.get(&format!("{name}.running_var"));
    let mut out = x.clone();
    for c in 0..x.c {
        let inv = 1.0 / (var[c] + 1e-5).sqrt();
        for i in 0..x.h * x.w {
            let j = c * x.h * x.w + i;
            out.v[j] = g[c] * (x.v[j] - m[c]) * inv + b[c];
        }
    }
    out
}

fn relu(mut x: Map) -> Map {
    for v in &mut x.v {
        *v = v.max(0.0);
    }
    x
}

fn block(p: &Params, name: &str, x: &Map, stride: usize) -> Map {
    let y = relu(bn_eval(
        p,
        &format!("{name}.bn1"),
        &conv(p, &format!("{name}.conv1"), x, stride),
    ));
    relu(bn_eval(
        p,
        &format!("{name}.bn2"),
        &conv(p, &format!("{name}.conv2"), &y, 1),
    ))
}

/// Half-pixel source coordinate, clamped at the low edge.
fn taps(out: usize, inp: usize, i: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(inp - 1);
    let i1 = (i0 + 1).min(inp - 1);
    (i0, i1, src - i0 as f64)
}

fn resize(x: &Map, h: usize, w: usize) -> Map {
    if (x.h, x.w) == (h, w) {
        return x.clone();
    }
    let mut v = vec![0.0; x.c * h * w];
    for c in 0..x.c {
        for oy in 0..h {
            let (y0, y1, fy) = taps(h, x.h, oy);
            for ox in 0..w {
                let (x0, x1, fx) = taps(w, x.w, ox);
                let top = x.at(c, y0, x0) * (1.0 - fx) + x.at(c, y0, x1) * fx;
                let bot = x.at(c, y1, x0) * (1.0 - fx) + x.at(c, y1, x1) * fx;
                v[(c * h + oy) * w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Map { c: x.c, h, w, v }
}

fn concat(a: &Map, b: &Map) -> Map {
    let mut v = a.v.clone();
    v.extend_from_slice(&b.v);
    Map {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        v,
    }
}

fn classify(p: &Params, name: &str, x: &Map) -> Vec<f64> {
    let w = p.get(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    let area = (x.h * x.w) as f64;
    let pooled: Vec<f64> = (0..x.c)
        .map(|c| x.v[c * x.h * x.w..(c + 1) * x.h * x.w].iter().sum::<f64>() / area)
        .collect();
    (0..b.len())
        .map(|o| b[o] + (0..x.c).map(|i| w[o * x.c + i] * pooled[i]).sum::<f64>())
        .collect()
}

struct Outputs {
    adapted: Vec<Map>,
    seg: Vec<Map>,
    cls: Vec<Vec<f64>>,
}

fn oracle_forward(p: &Params, n: usize, image: &Map) -> Outputs {
    let mut enc = Vec::new();
    let mut x = image.clone();
    for i in 0..n {
        x = block(p, &format!("enc{}", i + 1), &x, 2);
        enc.push(x.clone());
    }
    let mut dec = Vec::new();
    let mut y = block(p, "dec1", &enc[n - 1], 1);
    dec.push(y.clone());
    for k in 1..n {
        let skip = &enc[n - 1 - k];
        let up = resize(&y, skip.h, skip.w);
        y = block(p, &format!("dec{}", k + 1), &concat(&up, skip), 1);
        dec.push(y.clone());
    }
    let mut out = Outputs {
        adapted: Vec::new(),
        seg: Vec::new(),
        cls: Vec::new(),
    };
    for i in 0..n {
        let name = format!("exit{}", i + 1);
        let a = conv(p, &format!("{name}.adapter.conv1"), &enc[i], 1);
        let a = conv(p, &format!("{name}.adapter.conv2"), &a, 1);
        let a = bn_eval(p, &format!("{name}.adapter.bn"), &a);
        out.adapted.push(resize(&a, enc[0].h, enc[0].w));
        out.seg
            .push(resize(&conv(p, &format!("{name}.seg"), &dec[i], 1), image.h, image.w));
        out.cls.push(classify(p, &format!("{name}.cls"), &dec[i]));
    }
    out
}

fn close(a: f32, b: f64) -> bool {
    (a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0)
}

#[test]
fn toy_forward_matches_straight_line_oracle() {
    let cfg = ModelConfig::default();
    let mut model = Model::<f32>::build(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let [h, w] = cfg.input_size;
    let batch = 2;
    let data: Vec<f32> = (0..batch * 3 * h * w).map(|_| rng.random::<f32>()).collect();
    let images = Tensor::new(&[batch, 3, h, w], data).unwrap();
    // one train-mode pass so the running statistics are non-trivial
    model.forward(&mut Tape::new(), &images, BnMode::Train).unwrap();

    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &images, BnMode::Eval).unwrap();
    let params = Params(
        model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, (t.shape().to_vec(), t.to_f64_vec())))
            .collect(),
    );
    let mut compared = 0;
    for bi in 0..batch {
        let image = Map {
            c: 3,
            h,
            w,
            v: images.batch_item(bi).iter().map(|&v| v as f64).collect(),
        };
        let want = oracle_forward(&params, cfg.num_blocks, &image);
        for (i, bundle) in pass.bundles.iter().enumerate() {
            let pairs = [
                (tape.value(bundle.adapted_features).batch_item(bi), &want.adapted[i].v),
                (tape.value(bundle.seg_logits).batch_item(bi), &want.seg[i].v),
                (tape.value(bundle.cls_logits).batch_item(bi), &want.cls[i]),
            ];
            for (got, exp) in pairs {
                assert_eq!(got.len(), exp.len());
                for (&g, &e) in got.iter().zip(exp.iter()) {
                    assert!(close(g, e), "exit {} image {bi}: {g} vs {e}", i + 1);
                    compared += 1;
                }
            }
        }
    }
    assert!(compared > 10_000);
    let last = pass.bundles.last().unwrap();
    assert_eq!(last.seg_logits, pass.final_logits);
}
