//! Submanifold convolution, pooling and dense blocks against dense
//! reference implementations masked to the active sites.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tcvn::sparse::{dense_block, sparse_pool, submanifold_conv, SiteLayout, SparseFeatureMap};
use tcvn::Tensor;

const W: usize = 20;
const H: usize = 20;

struct Case {
    sites: Vec<(u16, u16)>,
    feats: Vec<Vec<f64>>,
}

fn random_case(rng: &mut ChaCha8Rng, cin: usize) -> Case {
    let density: f64 = rng.gen_range(0.03..0.5);
    let mut sites = Vec::new();
    for y in 0..H {
        for x in 0..W {
            if rng.gen_bool(density) {
                sites.push((x as u16, y as u16));
            }
        }
    }
    if sites.is_empty() {
        sites.push((rng.gen_range(0..W) as u16, rng.gen_range(0..H) as u16));
    }
    // order must not matter
    for i in (1..sites.len()).rev() {
        let j = rng.gen_range(0..=i);
        sites.swap(i, j);
    }
    let feats = sites.iter().map(|_| (0..cin).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    Case { sites, feats }
}

fn feature_map(c: &Case) -> SparseFeatureMap {
    let cin = c.feats[0].len();
    SparseFeatureMap {
        layout: SiteLayout::new(W, H, std::slice::from_ref(&c.sites)),
        features: Tensor::new(vec![c.sites.len(), cin], c.feats.concat()).unwrap(),
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Dense `[channel][y][x]` image with zeros off the active set.
fn densify(sites: &[(u16, u16)], feats: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
    let cin = feats[0].len();
    let mut img = vec![vec![vec![0.0; W]; H]; cin];
    for (&(x, y), f) in sites.iter().zip(feats) {
        for (c, v) in f.iter().enumerate() {
            img[c][y as usize][x as usize] = *v;
        }
    }
    img
}

/// Plain dense cross-correlation with zero padding, read back at `sites`.
fn dense_conv(sites: &[(u16, u16)], feats: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let img = densify(sites, feats);
    let s = w.shape();
    let (cout, cin, kh, kw) = (s[0], s[1], s[2], s[3]);
    let wd = w.data();
    sites
        .iter()
        .map(|&(x, y)| {
            (0..cout)
                .map(|o| {
                    let mut acc = b.data()[o];
                    for i in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let yy = y as i64 + ky as i64 - (kh / 2) as i64;
                                let xx = x as i64 + kx as i64 - (kw / 2) as i64;
                                if (0..H as i64).contains(&yy) && (0..W as i64).contains(&xx) {
                                    acc += wd[((o * cin + i) * kh + ky) * kw + kx] * img[i][yy as usize][xx as usize];
                                }
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_rows()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn conv_matches_dense_reference_200_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..5);
        let k = if rng.gen_bool(0.7) { 3 } else { 5 };
        let c = random_case(&mut rng, cin);
        let w = random_tensor(&mut rng, vec![cout, cin, k, k]);
        let b = random_tensor(&mut rng, vec![cout]);
        let sparse = submanifold_conv(&feature_map(&c), &w, &b).unwrap();
        assert_eq!(sparse.layout.image_sites(0), &c.sites[..]);
        let want = dense_conv(&c.sites, &c.feats, &w, &b);
        assert!(max_diff(&rows(&sparse.features), &want) < 1e-10);
    }
}

#[test]
fn pool_matches_dense_reference_200_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let cin = rng.gen_range(1..4);
        let stride = rng.gen_range(2..4);
        let c = random_case(&mut rng, cin);
        let pooled = sparse_pool(&feature_map(&c), stride).unwrap();
        // dense reference: max over the active pixels of each block
        let (pw, ph) = (W.div_ceil(stride), H.div_ceil(stride));
        let mut best = vec![vec![vec![f64::NEG_INFINITY; cin]; pw]; ph];
        for (&(x, y), f) in c.sites.iter().zip(&c.feats) {
            let cell = &mut best[y as usize / stride][x as usize / stride];
            for (m, v) in cell.iter_mut().zip(f) {
                *m = m.max(*v);
            }
        }
        let out_sites = pooled.layout.image_sites(0);
        let occupied = best.iter().flatten().filter(|v| v[0].is_finite()).count();
        assert_eq!(out_sites.len(), occupied);
        let want: Vec<Vec<f64>> = out_sites.iter().map(|&(x, y)| best[y as usize][x as usize].clone()).collect();
        assert!(max_diff(&rows(&pooled.features), &want) < 1e-10);
    }
}

#[test]
fn dense_block_matches_unrolled_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..40 {
        let cin = rng.gen_range(1..3);
        let growth = rng.gen_range(1..4);
        let depth = rng.gen_range(1..4);
        let c = random_case(&mut rng, cin);
        let layers: Vec<(Tensor, Tensor)> = (0..depth)
            .map(|i| {
                (
                    random_tensor(&mut rng, vec![growth, cin + i * growth, 3, 3]),
                    random_tensor(&mut rng, vec![growth]),
                )
            })
            .collect();
        let got = dense_block(&feature_map(&c), &layers).unwrap();
        // unrolled: concatenate relu(conv(all previous)) layer by layer
        let mut feats = c.feats.clone();
        for (w, b) in &layers {
            let y = dense_conv(&c.sites, &feats, w, b);
            for (f, yr) in feats.iter_mut().zip(y) {
                f.extend(yr.into_iter().map(|v| v.max(0.0)));
            }
        }
        assert!(max_diff(&rows(&got.features), &feats) < 1e-10);
    }
}

#[test]
fn single_site_sees_only_the_center_tap() {
    let c = Case {
        sites: vec![(0, 0)],
        feats: vec![vec![2.0]],
    };
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    w.data_mut().iter_mut().for_each(|x| *x = 5.0);
    w.data_mut()[4] = 0.5;
    let y = submanifold_conv(&feature_map(&c), &w, &Tensor::vector(vec![0.25])).unwrap();
    assert_eq!(y.features.data(), &[1.25]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_never_creates_sites(seed in any::<u64>(), cin in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_case(&mut rng, cin);
        let w = random_tensor(&mut rng, vec![2, cin, 3, 3]);
        let b = random_tensor(&mut rng, vec![2]);
        let y = submanifold_conv(&feature_map(&c), &w, &b).unwrap();
        prop_assert_eq!(y.layout.image_sites(0), &c.sites[..]);
        prop_assert_eq!(y.features.shape(), &[c.sites.len(), 2]);
    }

    #[test]
    fn pooling_preserves_the_global_maximum(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_case(&mut rng, 1);
        let p = sparse_pool(&feature_map(&c), 2).unwrap();
        let before = c.feats.iter().map(|f| f[0]).fold(f64::NEG_INFINITY, f64::max);
        let after = p.features.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(before, after);
    }
}
