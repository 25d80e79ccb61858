//! Brute-force and hand-unrolled oracles for the forward computations.
//! Each oracle is written directly from the defining formula, independent
//! of the library's own code paths.

use matchkit_core::attention::{
    attend_kde, attend_knn, attend_softmax_cosine, classify, predict, AttentionMode,
    AttentionWeights, SupportSet,
};
use matchkit_core::context::{embed_query_fce, embed_support_fce};
use matchkit_core::encoder::{
    embed_mlp, init_params, BoundParams, EncoderConfig, MlpEmbedConfig, ModelParams, ModelSpec,
};
use matchkit_core::context::FceConfig;
use matchkit_core::graph::Graph;
use matchkit_core::{Real, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: Real, hi: Real) -> Vec<Real> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn cosine(a: &[Real], b: &[Real]) -> Real {
    let dot: Real = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<Real>().sqrt().max(1e-8);
    let nb = b.iter().map(|x| x * x).sum::<Real>().sqrt().max(1e-8);
    dot / (na * nb)
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

/// Direct six-nested-loop same-padding convolution.
fn conv_oracle(
    input: &[Real],
    kernel: &[Real],
    (n, c, h, w): (usize, usize, usize, usize),
    (f, kh, kw): (usize, usize, usize),
) -> Vec<Real> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; n * f * h * w];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = oy as isize + dy as isize - ph as isize;
                                let ix = ox as isize + dx as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                    * kernel[((fi * c + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((ni * f + fi) * h + oy) * w + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_loop_oracle_on_spec_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let input = rand_vec(&mut rng, 1 * 2 * 5 * 5, -1.0, 1.0);
    let kernel = rand_vec(&mut rng, 4 * 2 * 3 * 3, -1.0, 1.0);
    let expected = conv_oracle(&input, &kernel, (1, 2, 5, 5), (4, 3, 3));

    let g = Graph::new();
    let x = g.constant(&Tensor::from_vec(vec![1, 2, 5, 5], input).unwrap());
    let k = g.constant(&Tensor::from_vec(vec![4, 2, 3, 3], kernel).unwrap());
    let out = x.conv2d(&k).unwrap();
    for (a, b) in out.value().data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn conv_matches_loop_oracle_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..25 {
        let (n, c, f) = (
            rng.gen_range(1..3usize),
            rng.gen_range(1..4usize),
            rng.gen_range(1..4usize),
        );
        let (h, w) = (rng.gen_range(1..=8usize), rng.gen_range(1..=8usize));
        let input = rand_vec(&mut rng, n * c * h * w, -1.0, 1.0);
        let kernel = rand_vec(&mut rng, f * c * 9, -1.0, 1.0);
        let expected = conv_oracle(&input, &kernel, (n, c, h, w), (f, 3, 3));

        let g = Graph::new();
        let x = g.constant(&Tensor::from_vec(vec![n, c, h, w], input).unwrap());
        let k = g.constant(&Tensor::from_vec(vec![f, c, 3, 3], kernel).unwrap());
        let out = x.conv2d(&k).unwrap();
        for (a, b) in out.value().data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "shape {n}x{c}x{h}x{w}");
        }
    }
}

#[test]
fn maxpool_matches_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..25 {
        let (h, w) = (rng.gen_range(1..=8usize), rng.gen_range(1..=8usize));
        let input = rand_vec(&mut rng, h * w, -1.0, 1.0);
        let g = Graph::new();
        let x = g.constant(&Tensor::from_vec(vec![1, 1, h, w], input.clone()).unwrap());
        let out = x.maxpool2x2().unwrap();
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        assert_eq!(out.shape(), &[1, 1, oh, ow]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = Real::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (iy, ix) = (oy * 2 + dy, ox * 2 + dx);
                        if iy < h && ix < w {
                            best = best.max(input[iy * w + ix]);
                        }
                    }
                }
                assert_eq!(out.value().data()[oy * ow + ox], best);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Attention modes
// ---------------------------------------------------------------------------

fn random_support(rng: &mut ChaCha8Rng, k: usize, d: usize, ways: usize) -> SupportSet {
    // round-robin labels guarantee every class appears
    let ids: Vec<usize> = (0..k).map(|i| i % ways).collect();
    let data = rand_vec(rng, k * d, -1.0, 1.0);
    SupportSet::new(Tensor::from_vec(vec![k, d], data).unwrap(), ids, ways).unwrap()
}

#[test]
fn knn_retained_set_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..500 {
        let s = random_support(&mut rng, 10, 6, 5);
        let q = rand_vec(&mut rng, 6, -1.0, 1.0);
        let w = attend_knn(&q, &s, 7).unwrap();

        // oracle: full sort of (distance, index), keep the 3 nearest
        let mut order: Vec<(Real, usize)> = (0..10)
            .map(|i| (1.0 - cosine(&q, s.embedding(i)), i))
            .collect();
        order.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expected = vec![0.0; 10];
        for &(_, i) in &order[..3] {
            expected[i] = 1.0 / 3.0;
        }
        assert_eq!(w.values, expected);
    }
}

#[test]
fn knn_single_neighbor_equals_brute_force_1nn() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..1000 {
        let k = rng.gen_range(2..12usize);
        let ways = rng.gen_range(2..=k.min(5));
        let s = random_support(&mut rng, k, 5, ways);
        let q = rand_vec(&mut rng, 5, -1.0, 1.0);

        let w = attend_knn(&q, &s, k - 1).unwrap();
        let dist = classify(&w, &s).unwrap();
        let got = predict(&dist);

        // oracle: nearest support by cosine similarity, lowest index on ties
        let mut best = 0;
        for i in 1..k {
            if cosine(&q, s.embedding(i)) > cosine(&q, s.embedding(best)) {
                best = i;
            }
        }
        assert_eq!(got, s.class_ids()[best]);
    }
}

#[test]
fn kde_matches_direct_gaussian_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..200 {
        let k = rng.gen_range(1..8usize);
        let ways = rng.gen_range(1..=k);
        let s = random_support(&mut rng, k, 4, ways);
        let q = rand_vec(&mut rng, 4, -1.0, 1.0);
        let bw: Real = rng.gen_range(0.3..3.0);
        let w = attend_kde(&q, &s, bw).unwrap();

        let raw: Vec<Real> = (0..k)
            .map(|i| {
                let sq: Real = q
                    .iter()
                    .zip(s.embedding(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (-sq / (2.0 * bw * bw)).exp()
            })
            .collect();
        let total: Real = raw.iter().sum();
        for (a, b) in w.values.iter().zip(&raw) {
            assert!((a - b / total).abs() < 1e-12);
        }
    }
}

#[test]
fn classify_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for _ in 0..300 {
        let k = rng.gen_range(1..10usize);
        let ways = rng.gen_range(1..=k);
        let s = random_support(&mut rng, k, 3, ways);
        let mut values = rand_vec(&mut rng, k, 0.0, 1.0);
        let total: Real = values.iter().sum();
        for v in values.iter_mut() {
            *v /= total;
        }
        let dist = classify(
            &AttentionWeights {
                values: values.clone(),
                mode: AttentionMode::SoftmaxCosine,
            },
            &s,
        )
        .unwrap();
        let mut expected = vec![0.0; ways];
        for (i, &c) in s.class_ids().iter().enumerate() {
            expected[c] += values[i];
        }
        assert_eq!(dist.probs, expected);
    }
}

#[test]
fn predict_commutes_with_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    for _ in 0..300 {
        let n = rng.gen_range(2..8usize);
        let mut probs = rand_vec(&mut rng, n, 0.0, 1.0);
        // force a unique maximum
        let arg = rng.gen_range(0..n);
        probs[arg] += 2.0;
        let base = predict(&matchkit_core::attention::ClassDistribution {
            probs: probs.clone(),
        });
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let permuted: Vec<Real> = (0..n).map(|i| probs[perm[i]]).collect();
        let got = predict(&matchkit_core::attention::ClassDistribution { probs: permuted });
        assert_eq!(perm[got], base);
    }
}

// ---------------------------------------------------------------------------
// Recurrent stages, hand-unrolled
// ---------------------------------------------------------------------------

struct CellOracle {
    wi: Vec<Real>,
    wf: Vec<Real>,
    wo: Vec<Real>,
    wc: Vec<Real>,
    bi: Vec<Real>,
    bf: Vec<Real>,
    bo: Vec<Real>,
    bc: Vec<Real>,
    d_h: usize,
}

impl CellOracle {
    fn load(params: &ModelParams, prefix: &str) -> Self {
        let get = |n: &str| params.get(&format!("{prefix}.{n}")).unwrap().to_vec();
        let bi = get("bi");
        Self {
            d_h: bi.len(),
            wi: get("wi"),
            wf: get("wf"),
            wo: get("wo"),
            wc: get("wc"),
            bi,
            bf: get("bf"),
            bo: get("bo"),
            bc: get("bc"),
        }
    }

    fn step(&self, x: &[Real], h_rec: &[Real], c: &[Real]) -> (Vec<Real>, Vec<Real>) {
        let cat: Vec<Real> = x.iter().chain(h_rec).copied().collect();
        let lin = |w: &[Real], b: &[Real]| -> Vec<Real> {
            (0..self.d_h)
                .map(|r| {
                    b[r] + cat
                        .iter()
                        .enumerate()
                        .map(|(j, &v)| w[r * cat.len() + j] * v)
                        .sum::<Real>()
                })
                .collect()
        };
        let sig = |v: Vec<Real>| -> Vec<Real> { v.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect() };
        let i = sig(lin(&self.wi, &self.bi));
        let f = sig(lin(&self.wf, &self.bf));
        let o = sig(lin(&self.wo, &self.bo));
        let g: Vec<Real> = lin(&self.wc, &self.bc).iter().map(|&x| x.tanh()).collect();
        let c_next: Vec<Real> = (0..self.d_h).map(|j| f[j] * c[j] + i[j] * g[j]).collect();
        let h_next: Vec<Real> = (0..self.d_h).map(|j| o[j] * c_next[j].tanh()).collect();
        (h_next, c_next)
    }
}

fn fce_model(d: usize, steps: usize) -> ModelSpec {
    ModelSpec {
        encoder: EncoderConfig::Mlp(MlpEmbedConfig {
            input_dim: d,
            hidden_dims: vec![],
            output_dim: d,
        }),
        fce: Some(FceConfig { steps }),
    }
}

#[test]
fn support_encoder_matches_hand_unrolled_recurrence() {
    let d = 4;
    let params = init_params(&fce_model(d, 1), 77).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let raw: Vec<Vec<Real>> = (0..3).map(|_| rand_vec(&mut rng, d, -1.0, 1.0)).collect();

    // oracle
    let fwd = CellOracle::load(&params, "ctx.fwd");
    let bwd = CellOracle::load(&params, "ctx.bwd");
    let zero = vec![0.0; d];
    let mut hf = Vec::new();
    let (mut h, mut c) = (zero.clone(), zero.clone());
    for x in &raw {
        let (h2, c2) = fwd.step(x, &h, &c);
        hf.push(h2.clone());
        h = h2;
        c = c2;
    }
    let mut hb = vec![zero.clone(); 3];
    let (mut h, mut c) = (zero.clone(), zero.clone());
    for i in (0..3).rev() {
        let (h2, c2) = bwd.step(&raw[i], &h, &c);
        hb[i] = h2.clone();
        h = h2;
        c = c2;
    }

    let g = Graph::new();
    let bound = BoundParams::bind_frozen(&g, &params);
    let vars: Vec<_> = raw
        .iter()
        .map(|r| g.constant(&Tensor::from_vec(vec![d], r.clone()).unwrap()))
        .collect();
    let out = embed_support_fce(&g, &bound, &vars).unwrap();
    for i in 0..3 {
        let got = out[i].value();
        for j in 0..d {
            let expected = hf[i][j] + hb[i][j] + raw[i][j];
            assert!(
                (got.data()[j] - expected).abs() < 1e-10,
                "item {i} coord {j}"
            );
        }
    }
}

#[test]
fn query_reader_matches_hand_unrolled_recurrence() {
    let d = 3;
    let params = init_params(&fce_model(d, 2), 78).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let supports: Vec<Vec<Real>> = (0..2).map(|_| rand_vec(&mut rng, d, -1.0, 1.0)).collect();
    let query = rand_vec(&mut rng, d, -1.0, 1.0);

    // oracle: state starts at the query, two read steps
    let cell = CellOracle::load(&params, "read");
    let mut h = query.clone();
    let mut c = vec![0.0; d];
    for _ in 0..2 {
        let logits: Vec<Real> = supports
            .iter()
            .map(|s| s.iter().zip(&h).map(|(a, b)| a * b).sum())
            .collect();
        let m = logits.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let exps: Vec<Real> = logits.iter().map(|&l| (l - m).exp()).collect();
        let z: Real = exps.iter().sum();
        let mut readout = vec![0.0; d];
        for (i, s) in supports.iter().enumerate() {
            for j in 0..d {
                readout[j] += exps[i] / z * s[j];
            }
        }
        let h_rec: Vec<Real> = h.iter().chain(&readout).copied().collect();
        let (h_hat, c2) = cell.step(&query, &h_rec, &c);
        h = (0..d).map(|j| h_hat[j] + query[j]).collect();
        c = c2;
    }

    let g = Graph::new();
    let bound = BoundParams::bind_frozen(&g, &params);
    let sup_vars: Vec<_> = supports
        .iter()
        .map(|r| g.constant(&Tensor::from_vec(vec![d], r.clone()).unwrap()))
        .collect();
    let q = g.constant(&Tensor::from_vec(vec![d], query.clone()).unwrap());
    let out = embed_query_fce(&g, &bound, &q, &sup_vars, 2).unwrap();
    for j in 0..d {
        assert!((out.value().data()[j] - h[j]).abs() < 1e-10, "coord {j}");
    }
}

// ---------------------------------------------------------------------------
// Miscellaneous forward oracles
// ---------------------------------------------------------------------------

#[test]
fn mlp_matches_direct_matrix_product() {
    let cfg = MlpEmbedConfig {
        input_dim: 5,
        hidden_dims: vec![7],
        output_dim: 4,
    };
    let spec = ModelSpec {
        encoder: EncoderConfig::Mlp(cfg.clone()),
        fce: None,
    };
    let params = init_params(&spec, 55).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x = rand_vec(&mut rng, 3 * 5, -1.0, 1.0);

    let w0 = params.get("enc.fc0.w").unwrap().to_vec();
    let w1 = params.get("enc.fc1.w").unwrap().to_vec();
    let mut expected = vec![0.0; 3 * 4];
    for r in 0..3 {
        let mut hidden = vec![0.0; 7];
        for j in 0..7 {
            for i in 0..5 {
                hidden[j] += x[r * 5 + i] * w0[i * 7 + j];
            }
            hidden[j] = hidden[j].max(0.0);
        }
        for j in 0..4 {
            for i in 0..7 {
                expected[r * 4 + j] += hidden[i] * w1[i * 4 + j];
            }
        }
    }

    let g = Graph::new();
    let bound = BoundParams::bind_frozen(&g, &params);
    let out = embed_mlp(
        &g,
        &bound,
        &cfg,
        &Tensor::from_vec(vec![3, 5], x).unwrap(),
    )
    .unwrap();
    for (a, b) in out.value().data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn rotation_matches_index_permutation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..20 {
        let n = rng.gen_range(2..6usize);
        let data = rand_vec(&mut rng, n * n, 0.0, 1.0);
        let t = Tensor::from_vec(vec![n, n], data.clone()).unwrap();
        let r = t.rotate90(1).unwrap();
        // counter-clockwise quarter turn: out[n-1-x][y] = in[y][x]
        for y in 0..n {
            for x in 0..n {
                assert_eq!(r.data()[(n - 1 - x) * n + y], data[y * n + x]);
            }
        }
    }
}

#[test]
fn batchnorm_standardizes_normal_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let n = 512;
    // Box-Muller standard normals
    let data: Vec<Real> = (0..n * 2)
        .map(|_| {
            let u1: Real = rng.gen_range(1e-12..1.0);
            let u2: Real = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    let g = Graph::new();
    let x = g.constant(&Tensor::from_vec(vec![n, 2, 1, 1], data).unwrap());
    let gamma = g.constant(&Tensor::full(vec![2], 1.0));
    let beta = g.constant(&Tensor::zeros(vec![2]));
    let (y, _) = x.batchnorm_train(&gamma, &beta).unwrap();
    let out = y.value();
    for c in 0..2 {
        let vals: Vec<Real> = (0..n).map(|i| out.data()[i * 2 + c]).collect();
        let mean: Real = vals.iter().sum::<Real>() / n as Real;
        let var: Real = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n as Real;
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }
}

#[test]
fn taped_attention_agrees_with_plain_attention() {
    // the training path (graph ops) and the evaluation path (plain math)
    // must produce the same distribution
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    for _ in 0..100 {
        let k = rng.gen_range(2..7usize);
        let ways = rng.gen_range(2..=k);
        let s = random_support(&mut rng, k, 6, ways);
        let q = rand_vec(&mut rng, 6, -1.0, 1.0);

        let plain = classify(&attend_softmax_cosine(&q, &s).unwrap(), &s).unwrap();

        let g = Graph::new();
        let qv = g.constant(&Tensor::from_vec(vec![6], q.clone()).unwrap());
        let sup: Vec<_> = (0..k)
            .map(|i| g.constant(&Tensor::from_vec(vec![6], s.embedding(i).to_vec()).unwrap()))
            .collect();
        let w = matchkit_core::attention::attend_softmax_cosine_var(&qv, &sup).unwrap();
        let labels = g.constant(s.labels());
        let probs = matchkit_core::attention::classify_var(&w, &labels).unwrap();
        for (a, b) in probs.value().data().iter().zip(&plain.probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
