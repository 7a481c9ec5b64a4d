//! Acceptance gate. Each criterion prints one PASS/FAIL line with its
//! measurement and runtime; the process fails if any criterion fails.
//!
//! Run a subset with `cargo test --test acceptance -- <name-fragment>`.

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mvi_core::fusion::{fuse_detections, stitch_probabilities, Detection, ProbabilityTile};
use mvi_core::imaging::RasterImage;
use mvi_core::imaging::{make_tile_grid, BinaryMask, Resolution, TileRect};
use mvi_core::io::{write_detections, write_probability_tiles, Manifest};
use mvi_core::maskgen::{generate_reference_mask, MaskGenParams};
use mvi_core::metrics::{dice_f1, iou, mae, pearson_r, PairedSeries};
use mvi_core::morphology::{binary_morph, otsu_threshold, DiskKernel, MorphOp};
use mvi_core::mvindex::{
    build_report, k_coefficient, mv_index_single, weibel_estimate, RoiSpec, WeibelGrid,
    TEN_HPF_AREA_MM2,
};
use mvi_core::stain::{deconvolve, OdImage, StainMatrix};
use mvi_core::synth::{
    dab_blob_phantom, epithelium_field, random_detections, BlobPhantomParams, SmoothField,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RES: Resolution = Resolution::SCAN_40X;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// 1 ------------------------------------------------------------------------

fn coefficient() -> Outcome {
    // k = 100 / 2.37 mm², written out to the stated digits.
    let expected = 42.194092827;
    let k = k_coefficient(2.37).unwrap();
    Outcome::new(
        (k - expected).abs() <= 1e-9,
        format!("k(2.37) = {k:.12}, expected {expected} ± 1e-9"),
    )
}

// 2 ------------------------------------------------------------------------

fn units_sanity() -> Outcome {
    let k = k_coefficient(TEN_HPF_AREA_MM2).unwrap();
    let mut bad = Vec::new();
    for mc in [0u64, 1, 24, 1000] {
        let mv = mv_index_single(mc, 100.0, k).unwrap();
        if mv != mc as f64 / 2.37 {
            bad.push(format!("mc {mc}: {mv:e} vs {:e}", mc as f64 / 2.37));
        }
    }
    Outcome::new(
        bad.is_empty(),
        if bad.is_empty() {
            "mv(mc, 100, k) == mc/2.37 bit-exact for mc ∈ {0, 1, 24, 1000}".into()
        } else {
            bad.join("; ")
        },
    )
}

// 3 ------------------------------------------------------------------------

/// Exhaustive Otsu: class 0 is `v ≤ t`; between-class variance compared
/// exactly as `(n1·s0 − n0·s1)² / (n0·n1)`; first maximum wins.
fn otsu_oracle(px: &[u8]) -> u8 {
    let n = px.len() as i128;
    let s: i128 = px.iter().map(|&v| v as i128).sum();
    let mut best: Option<(u8, i128, i128)> = None;
    for t in 0..=255u8 {
        let n0 = px.iter().filter(|&&v| v <= t).count() as i128;
        let s0: i128 = px.iter().filter(|&&v| v <= t).map(|&v| v as i128).sum();
        let (n1, s1) = (n - n0, s - s0);
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = n1 * s0 - n0 * s1;
        let (num, den) = (d * d, n0 * n1);
        match best {
            Some((_, bn, bd)) if num * bd <= bn * den => {}
            _ => best = Some((t, num, den)),
        }
    }
    best.map_or(px[0], |b| b.0)
}

fn otsu_image(seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    let n = 32 * 32;
    match seed % 5 {
        0 => (0..n).map(|_| r.gen()).collect(),
        1 => {
            let (a, b) = (r.gen_range(20..120) as f64, r.gen_range(130..240) as f64);
            (0..n)
                .map(|_| {
                    let c = if r.gen_bool(0.4) { a } else { b };
                    let jitter: f64 = (0..4).map(|_| r.gen_range(-12.0..12.0)).sum();
                    (c + jitter).round().clamp(0.0, 255.0) as u8
                })
                .collect()
        }
        2 => {
            let levels: Vec<u8> = (0..r.gen_range(2..5)).map(|_| r.gen()).collect();
            (0..n)
                .map(|_| levels[r.gen_range(0..levels.len())])
                .collect()
        }
        3 => {
            // Three equally spaced levels with symmetric counts: two splits tie.
            let d = r.gen_range(1..80u8);
            let a = r.gen_range(0..=255 - 2 * d);
            let m = r.gen_range(1..500);
            let mut v: Vec<u8> = [vec![a; m], vec![a + d; n - 2 * m], vec![a + 2 * d; m]].concat();
            for i in (1..v.len()).rev() {
                v.swap(i, r.gen_range(0..=i));
            }
            v
        }
        _ if seed % 100 == 4 => vec![r.gen(); n],
        _ => (0..n)
            .map(|_| r.gen_range(0..4u8) * 60 + r.gen_range(0..3u8))
            .collect(),
    }
}

fn otsu_equivalence() -> Outcome {
    let mut mismatches = 0;
    let mut ties = 0;
    for seed in 0..1000 {
        let px = otsu_image(seed);
        let img = RasterImage::gray8(32, 32, RES, px.clone()).unwrap();
        let got = otsu_threshold(&img).unwrap().threshold;
        let want = otsu_oracle(&px);
        if got != want {
            mismatches += 1;
        }
        if seed % 5 == 3 {
            ties += 1;
        }
    }
    Outcome::new(
        mismatches == 0,
        format!(
            "{mismatches}/1000 mismatches vs exhaustive oracle ({ties} images with tied splits)"
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn brute_dilate(m: &BinaryMask, r: i64) -> BinaryMask {
    let (w, h) = m.dims();
    BinaryMask::from_fn(w, h, m.resolution(), |x, y| {
        (-r..=r).any(|dy| {
            (-r..=r).any(|dx| {
                let (sx, sy) = (x as i64 + dx, y as i64 + dy);
                dx * dx + dy * dy <= r * r
                    && sx >= 0
                    && sy >= 0
                    && (sx as usize) < w
                    && (sy as usize) < h
                    && m.get(sx as usize, sy as usize)
            })
        })
    })
}

fn brute_erode(m: &BinaryMask, r: i64) -> BinaryMask {
    let (w, h) = m.dims();
    BinaryMask::from_fn(w, h, m.resolution(), |x, y| {
        (-r..=r).all(|dy| {
            (-r..=r).all(|dx| {
                let (sx, sy) = (x as i64 + dx, y as i64 + dy);
                dx * dx + dy * dy > r * r
                    || (sx >= 0
                        && sy >= 0
                        && (sx as usize) < w
                        && (sy as usize) < h
                        && m.get(sx as usize, sy as usize))
            })
        })
    })
}

fn subset(a: &BinaryMask, b: &BinaryMask) -> bool {
    a.bits().iter().zip(b.bits()).all(|(&x, &y)| !x || y)
}

fn random_mask(seed: u64) -> BinaryMask {
    let mut r = rng(seed);
    let mut bits = vec![false; 32 * 32];
    if seed.is_multiple_of(2) {
        let p = r.gen_range(0.2..0.8);
        bits.iter_mut().for_each(|b| *b = r.gen_bool(p));
    } else {
        for _ in 0..r.gen_range(1..6) {
            let (cx, cy, rad) = (
                r.gen_range(0..32) as i64,
                r.gen_range(0..32) as i64,
                r.gen_range(2..9) as i64,
            );
            for y in 0..32i64 {
                for x in 0..32i64 {
                    if (x - cx).pow(2) + (y - cy).pow(2) <= rad * rad {
                        bits[(y * 32 + x) as usize] = true;
                    }
                }
            }
        }
        for _ in 0..r.gen_range(0..20) {
            let i = r.gen_range(0..bits.len());
            bits[i] = !bits[i];
        }
    }
    BinaryMask::from_bits(32, 32, RES, bits).unwrap()
}

fn with_margin(m: &BinaryMask, margin: usize) -> BinaryMask {
    let (w, h) = m.dims();
    BinaryMask::from_fn(w, h, m.resolution(), |x, y| {
        x >= margin && y >= margin && x + margin < w && y + margin < h && m.get(x, y)
    })
}

fn morphology_properties() -> Outcome {
    let mut failures: Vec<String> = Vec::new();
    let mut fail = |what: &str, seed: u64| {
        if failures.len() < 5 {
            failures.push(format!("{what} (mask {seed})"));
        } else if failures.len() == 5 {
            failures.push("…".into());
        }
    };
    for seed in 0..500 {
        let a = random_mask(seed);
        let radius = 1 + (seed % 3) as u32;
        let k = DiskKernel::new(radius);
        let op = |m: &BinaryMask, o: MorphOp| binary_morph(m, o, k);

        let dil = op(&a, MorphOp::Dilate);
        let ero = op(&a, MorphOp::Erode);
        if dil != brute_dilate(&a, radius as i64) || ero != brute_erode(&a, radius as i64) {
            fail("brute-force disagreement", seed);
        }

        // Erosion is the complement of dilating the complement when the
        // raster border is background.
        let framed = with_margin(&a, 2);
        if op(&framed, MorphOp::Erode) != op(&framed.complement(), MorphOp::Dilate).complement() {
            fail("duality", seed);
        }

        let opened = op(&a, MorphOp::Open);
        let closed = op(&a, MorphOp::Close);
        if op(&opened, MorphOp::Open) != opened {
            fail("open idempotence", seed);
        }
        if op(&closed, MorphOp::Close) != closed {
            fail("close idempotence", seed);
        }

        let mut r = rng(seed ^ 0xabcdef);
        let extra: Vec<bool> = (0..a.bits().len()).map(|_| r.gen_bool(0.15)).collect();
        let b = BinaryMask::from_bits(
            32,
            32,
            RES,
            a.bits().iter().zip(&extra).map(|(&x, &y)| x || y).collect(),
        )
        .unwrap();
        for o in [
            MorphOp::Erode,
            MorphOp::Dilate,
            MorphOp::Open,
            MorphOp::Close,
        ] {
            if !subset(&op(&a, o), &op(&b, o)) {
                fail(&format!("monotonicity of {o:?}"), seed);
            }
        }
        let bigger = DiskKernel::new(radius + 1);
        if !subset(&dil, &binary_morph(&a, MorphOp::Dilate, bigger))
            || !subset(&binary_morph(&a, MorphOp::Erode, bigger), &ero)
        {
            fail("radius monotonicity", seed);
        }
    }
    let pass = failures.is_empty();
    Outcome::new(
        pass,
        if pass {
            "500 masks, r ∈ {1,2,3}: duality, open/close idempotence, monotonicity and brute-force equality exact".into()
        } else {
            failures.join("; ")
        },
    )
}

// 5 ------------------------------------------------------------------------

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn deconvolution_round_trip() -> Outcome {
    // Published H-DAB vectors, normalised here independently of the library.
    let h = unit([0.650, 0.704, 0.286]);
    let d = unit([0.269, 0.568, 0.776]);
    let m = StainMatrix::h_dab();
    let mut r = rng(5);
    let conc: Vec<[f64; 2]> = (0..1000)
        .map(|_| [r.gen_range(0.0..3.0), r.gen_range(0.0..3.0)])
        .collect();
    let od: Vec<[f64; 3]> = conc
        .iter()
        .map(|c| std::array::from_fn(|i| c[0] * h[i] + c[1] * d[i]))
        .collect();
    let img = OdImage::new(1000, 1, RES, od).unwrap();
    let out = deconvolve(&img, &m);
    let hc = out.channel("hematoxylin").unwrap();
    let dc = out.channel("dab").unwrap();
    let err = conc
        .iter()
        .enumerate()
        .map(|(i, c)| (hc[i] - c[0]).abs().max((dc[i] - c[1]).abs()))
        .fold(0.0, f64::max);
    Outcome::new(
        err < 1e-6,
        format!("max |ĉ − c| = {err:.3e} over 1000 pixels (< 1e-6)"),
    )
}

// 6 ------------------------------------------------------------------------

fn maskgen_fidelity() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let m = StainMatrix::h_dab();
    let params = MaskGenParams::default();
    let phantom = BlobPhantomParams::default();
    // Phantom geometry must respect the stated preconditions.
    let geometry_ok = phantom.disk_radius.0 >= 2.0 * params.open_radius_px as f64
        && phantom.max_gap < 2.0 * params.close_radius_px as f64;
    let ious: Vec<f64> = pool.install(|| {
        (0..10)
            .map(|seed| {
                let p = dab_blob_phantom(seed, &phantom, &m);
                let out = generate_reference_mask(&p.ihc, &params, &m).unwrap();
                iou(&out.mask, &p.truth).unwrap()
            })
            .collect()
    });
    let min = ious.iter().copied().fold(f64::INFINITY, f64::min);
    Outcome::new(
        geometry_ok && min >= 0.9,
        format!(
            "10 phantoms 2048², single thread: IOU min {min:.4}, all [{}]",
            ious.iter()
                .map(|v| format!("{v:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

// 7 ------------------------------------------------------------------------

fn fusion_invariance() -> Outcome {
    let (w, h) = (2000usize, 1500usize);
    let field = SmoothField::new(77, w, h, 16);
    let quanta: Vec<u16> = (0..w * h)
        .map(|i| (field.probability((i % w) as f64, (i / w) as f64) * 65535.0).round() as u16)
        .collect();
    // Mean of identical quanta is the quantum itself; `q/65535 ≥ 0.5` ⇔ `2q ≥ 65535`.
    let oracle = BinaryMask::from_fn(w, h, Resolution::SCAN_20X, |x, y| {
        2 * quanta[y * w + x] as u32 >= 65535
    });

    let mut r = rng(7);
    let boxes: Vec<Detection> = (0..200)
        .map(|_| {
            let bw = r.gen_range(20.0..60.0f64).round();
            let bh = r.gen_range(20.0..60.0f64).round();
            let x = (r.gen_range(0.0..w as f64 - bw) * 4.0).round() / 4.0;
            let y = (r.gen_range(0.0..h as f64 - bh) * 4.0).round() / 4.0;
            Detection::new(x, y, bw, bh, 0.9).unwrap()
        })
        .collect();

    let mut problems = Vec::new();
    let mut multi_covered = 0;
    let mut checked = 0;
    for size in [256, 512, 1024] {
        for overlap in [0, 64, 128] {
            let grid = make_tile_grid((w, h), size, overlap).unwrap();
            let tiles: Vec<ProbabilityTile> = grid
                .tiles()
                .iter()
                .map(|&t| {
                    let q = (t.y..t.y + t.h)
                        .flat_map(|y| quanta[y * w + t.x..y * w + t.x + t.w].iter().copied())
                        .collect();
                    ProbabilityTile::from_quanta(t, q).unwrap()
                })
                .collect();
            let stitched = stitch_probabilities(&tiles, (w, h), 0.5, Resolution::SCAN_20X).unwrap();
            if stitched != oracle {
                problems.push(format!("stitch {size}/{overlap} differs"));
            }

            for b in &boxes {
                let covering: Vec<(usize, TileRect)> = grid
                    .tiles()
                    .iter()
                    .copied()
                    .enumerate()
                    .filter(|(_, t)| {
                        b.x >= t.x as f64
                            && b.y >= t.y as f64
                            && b.x + b.w <= (t.x + t.w) as f64
                            && b.y + b.h <= (t.y + t.h) as f64
                    })
                    .collect();
                if covering.is_empty() {
                    continue;
                }
                checked += 1;
                if covering.len() > 1 {
                    multi_covered += 1;
                }
                let per_tile: Vec<(TileRect, Vec<Detection>)> = covering
                    .iter()
                    .map(|&(i, t)| {
                        let local = Detection {
                            score: 0.9 - 0.001 * i as f64,
                            ..b.translated(-(t.x as f64), -(t.y as f64))
                        };
                        (t, vec![local])
                    })
                    .collect();
                let fused = fuse_detections(&per_tile, 0.5);
                let best = covering
                    .iter()
                    .map(|&(i, _)| 0.9 - 0.001 * i as f64)
                    .fold(f64::MIN, f64::max);
                let ok = fused.len() == 1
                    && (fused[0].x - b.x).abs() < 1e-9
                    && (fused[0].y - b.y).abs() < 1e-9
                    && fused[0].score == best;
                if !ok && problems.len() < 5 {
                    problems.push(format!(
                        "box {b:?} on {size}/{overlap} fused to {} boxes",
                        fused.len()
                    ));
                }
            }
        }
    }
    Outcome::new(
        problems.is_empty() && multi_covered > 0,
        if problems.is_empty() {
            format!(
                "9 grids: stitched masks bit-identical to the per-pixel oracle; {checked} box injections ({multi_covered} in ≥2 tiles) each fused to one box"
            )
        } else {
            problems.join("; ")
        },
    )
}

// 8 ------------------------------------------------------------------------

fn weibel_unbiasedness() -> Outcome {
    let (w, h) = (1200, 1200);
    let mut lines = Vec::new();
    let mut pass = true;
    for (i, p) in [0.1, 0.3, 0.5].into_iter().enumerate() {
        let mask = epithelium_field(100 + i as u64, w, h, p, RES);
        let truth = mask.count_foreground() as f64 / (w * h) as f64;
        let sigma = (truth * (1.0 - truth) / 432.0).sqrt();
        let estimates: Vec<f64> = (0..1000u64)
            .map(|seed| {
                let mut r = rng(seed);
                let grid = WeibelGrid {
                    n_points: 432,
                    offset: (r.gen(), r.gen()),
                };
                weibel_estimate(&mask, &grid).unwrap()
            })
            .collect();
        let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
        let within = estimates
            .iter()
            .filter(|e| (*e - truth).abs() <= 3.0 * sigma)
            .count();
        let ok = (mean - truth).abs() <= 0.01 && within >= 990;
        pass &= ok;
        lines.push(format!(
            "p={truth}: mean {mean:.4}, {within}/1000 within 3σ"
        ));
    }
    Outcome::new(pass, lines.join("; "))
}

// 9 ------------------------------------------------------------------------

fn pearson_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    // Values are multiples of 1/8, so scaled sums are exact integers.
    let xi: Vec<i128> = x.iter().map(|v| (v * 8.0) as i128).collect();
    let yi: Vec<i128> = y.iter().map(|v| (v * 8.0) as i128).collect();
    let n = x.len() as i128;
    let (sx, sy) = (xi.iter().sum::<i128>(), yi.iter().sum::<i128>());
    let sxy: i128 = xi.iter().zip(&yi).map(|(a, b)| a * b).sum();
    let sxx: i128 = xi.iter().map(|a| a * a).sum();
    let syy: i128 = yi.iter().map(|b| b * b).sum();
    let cov = n * sxy - sx * sy;
    let (vx, vy) = (n * sxx - sx * sx, n * syy - sy * sy);
    if n < 2 || vx == 0 || vy == 0 {
        return None;
    }
    Some(cov as f64 / ((vx as f64).sqrt() * (vy as f64).sqrt()))
}

fn metrics_oracles() -> Outcome {
    let mut problems = Vec::new();
    for seed in 0..1000u64 {
        let mut r = rng(seed);
        let density = if seed % 100 == 0 {
            0.0
        } else {
            r.gen_range(0.0..1.0)
        };
        let density2 = if seed % 100 == 0 {
            0.0
        } else {
            r.gen_range(0.0..1.0)
        };
        let pset: HashSet<(usize, usize)> = (0..256)
            .filter(|_| r.gen_bool(density))
            .map(|i| (i % 16, i / 16))
            .collect();
        let rset: HashSet<(usize, usize)> = (0..256)
            .filter(|_| r.gen_bool(density2))
            .map(|i| (i % 16, i / 16))
            .collect();
        let pm = BinaryMask::from_fn(16, 16, RES, |x, y| pset.contains(&(x, y)));
        let rm = BinaryMask::from_fn(16, 16, RES, |x, y| rset.contains(&(x, y)));
        let inter = pset.intersection(&rset).count();
        let union = pset.union(&rset).count();
        let want_iou = if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
        let total = pset.len() + rset.len();
        let want_dice = if total == 0 {
            1.0
        } else {
            2.0 * inter as f64 / total as f64
        };
        let (j, d) = (iou(&pm, &rm).unwrap(), dice_f1(&pm, &rm).unwrap());
        if j != want_iou || d != want_dice {
            problems.push(format!(
                "mask pair {seed}: iou {j} vs {want_iou}, dice {d} vs {want_dice}"
            ));
        }
        if (d - 2.0 * j / (1.0 + j)).abs() > 1e-12 || j > d {
            problems.push(format!("mask pair {seed}: identity/order violated"));
        }

        let n = r.gen_range(1..60);
        let constant = seed % 50 == 0;
        let x: Vec<f64> = (0..n)
            .map(|_| {
                if constant {
                    2.5
                } else {
                    r.gen_range(-800..=800) as f64 / 8.0
                }
            })
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|_| r.gen_range(-800..=800) as f64 / 8.0)
            .collect();
        let s = PairedSeries::new(x.clone(), y.clone()).unwrap();
        let want_mae = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
        if (mae(&s) - want_mae).abs() > 1e-12 {
            problems.push(format!("series {seed}: mae {} vs {want_mae}", mae(&s)));
        }
        match (pearson_r(&s), pearson_oracle(&x, &y)) {
            (Ok(got), Some(want)) => {
                if (got - want).abs() > 1e-12 {
                    problems.push(format!("series {seed}: pearson {got} vs {want}"));
                }
                let (a, b) = (r.gen_range(0.1..10.0), r.gen_range(-50.0..50.0));
                let t =
                    PairedSeries::new(x.iter().map(|v| a * v + b).collect(), y.clone()).unwrap();
                if (pearson_r(&t).unwrap() - got).abs() > 1e-12 {
                    problems.push(format!("series {seed}: pearson not affine invariant"));
                }
            }
            (Err(_), None) => {}
            (got, want) => problems.push(format!("series {seed}: pearson {got:?} vs {want:?}")),
        }
    }
    problems.truncate(5);
    Outcome::new(
        problems.is_empty(),
        if problems.is_empty() {
            "1000 mask pairs and 1000 series match the brute-force oracles; Dice = 2·IOU/(1+IOU) and IOU ≤ Dice on all pairs".into()
        } else {
            problems.join("; ")
        },
    )
}

// 10 -----------------------------------------------------------------------

fn run_mvindex(dir: &Path, threads: usize, out: &str) -> (Duration, Vec<u8>) {
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_mvi"))
        .current_dir(dir)
        .args([
            "--threads",
            &threads.to_string(),
            "mvindex",
            "--roi",
            "roi.json",
            "--seg",
            "seg/manifest.json",
        ])
        .args(["--dets", "dets.jsonl", "--out", out])
        .output()
        .expect("mvi runs");
    let elapsed = start.elapsed();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    (elapsed, std::fs::read(dir.join(out)).unwrap())
}

fn determinism() -> Outcome {
    let tmp = tempfile::TempDir::new().unwrap();
    let dir = tmp.path();
    // 2.37 mm² at 0.0625 µm²/px is 37.92e6 px, a 6158 px square.
    let side = (2.37e6f64 / 0.0625).sqrt().round() as usize;
    Manifest {
        width_px: side,
        height_px: side,
        microns_per_pixel: RES,
        tiles: vec![],
    }
    .save(&dir.join("roi.json"))
    .unwrap();

    let seg_side = side / 2;
    let field = SmoothField::new(10, seg_side, seg_side, 10);
    let grid = make_tile_grid((seg_side, seg_side), 1024, 128).unwrap();
    let tiles: Vec<ProbabilityTile> = grid
        .tiles()
        .iter()
        .map(|&t| {
            ProbabilityTile::from_fn(t, |x, y| field.probability(x as f64, y as f64)).unwrap()
        })
        .collect();
    write_probability_tiles(
        &tiles,
        (seg_side, seg_side),
        Resolution::SCAN_20X,
        &dir.join("seg"),
    )
    .unwrap();

    let mut dets = random_detections(10, side, side, 400);
    let dupes: Vec<Detection> = dets[..60]
        .iter()
        .map(|d| Detection {
            x: d.x + 1.5,
            score: d.score * 0.9,
            ..*d
        })
        .collect();
    dets.extend(dupes);
    write_detections(&dets, &dir.join("dets.jsonl")).unwrap();

    let (t1, a) = run_mvindex(dir, 1, "a.json");
    let (_, b) = run_mvindex(dir, 1, "b.json");
    let (_, c) = run_mvindex(dir, 8, "c.json");
    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    Outcome::new(
        a == b && a == c && t1 < Duration::from_secs(60),
        format!(
            "ROI {side}², seg {seg_side}² in {} tiles, {} detections: runs identical {}, 1 vs 8 threads identical {}, single-thread wall {t1:.2?} (mc_total {}, mc_kept {})",
            tiles.len(),
            dets.len(),
            a == b,
            a == c,
            report["mc_total"],
            report["mc_kept"]
        ),
    )
}

// 11 -----------------------------------------------------------------------

fn report_semantics() -> Outcome {
    // Two side-by-side fields, each half covered; two mitoses in the left one.
    let mask = BinaryMask::from_fn(200, 100, RES, |_, y| y < 50);
    let kept = vec![
        Detection::new(20.0, 10.0, 10.0, 10.0, 0.9).unwrap(),
        Detection::new(60.0, 20.0, 10.0, 10.0, 0.9).unwrap(),
    ];
    let roi = RoiSpec {
        area_mm2: 2.37,
        microns_per_pixel: RES,
        n_fields: 2,
    };
    let report = build_report(&mask, &kept, &kept, &roi, 0.5).unwrap();
    // Stated worked example: per-field k = 100/1.185, field values {337.5527…, 0}.
    let k_field = 100.0 / (2.37 / 2.0);
    let field_values = [2.0 * k_field / 0.5, 0.0];
    let expected = (field_values[0] + field_values[1]) / 2.0;
    let ok = (report.mv_mean - expected).abs() <= 1e-6 && (report.mv_std - expected).abs() <= 1e-6;
    let fields: Vec<String> = report
        .fields
        .iter()
        .map(|f| format!("{:?}", f.mv.unwrap_or(f64::NAN)))
        .collect();
    Outcome::new(
        ok,
        format!(
            "mean {:.7} std {:.7} (fields [{}]) vs expected {expected:.7}; expected value divides by Vv as a fraction (0.5) while Vv is in percent elsewhere",
            report.mv_mean,
            report.mv_std,
            fields.join(", ")
        ),
    )
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "coefficient",
            budget: Duration::from_secs(1),
            run: coefficient,
        },
        Criterion {
            id: 2,
            name: "units_sanity",
            budget: Duration::from_secs(1),
            run: units_sanity,
        },
        Criterion {
            id: 3,
            name: "otsu_oracle",
            budget: Duration::from_secs(5),
            run: otsu_equivalence,
        },
        Criterion {
            id: 4,
            name: "morphology_properties",
            budget: Duration::from_secs(5),
            run: morphology_properties,
        },
        Criterion {
            id: 5,
            name: "deconvolution_round_trip",
            budget: Duration::from_secs(1),
            run: deconvolution_round_trip,
        },
        Criterion {
            id: 6,
            name: "maskgen_fidelity",
            budget: Duration::from_secs(60),
            run: maskgen_fidelity,
        },
        Criterion {
            id: 7,
            name: "fusion_invariance",
            budget: Duration::from_secs(10),
            run: fusion_invariance,
        },
        Criterion {
            id: 8,
            name: "weibel_unbiasedness",
            budget: Duration::from_secs(10),
            run: weibel_unbiasedness,
        },
        Criterion {
            id: 9,
            name: "metrics_oracles",
            budget: Duration::from_secs(5),
            run: metrics_oracles,
        },
        Criterion {
            id: 10,
            name: "determinism",
            budget: Duration::from_secs(180),
            run: determinism,
        },
        Criterion {
            id: 11,
            name: "report_semantics",
            budget: Duration::from_secs(1),
            run: report_semantics,
        },
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.budget;
        let pass = outcome.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "criterion {:>2} {:<26} {}  {} [{elapsed:.2?}, budget {:?}{}]",
            c.id,
            c.name,
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            c.budget,
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
