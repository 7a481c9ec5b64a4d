//! Seeded synthetic inputs: DAB-blob IHC phantoms, epithelium masks with an
//! exact area fraction, smooth probability maps and detection sets.
//!
//! Used by the test suites and for benchmarking the pipeline without slides.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fusion::Detection;
use crate::imaging::{BinaryMask, RasterImage, Resolution};
use crate::stain::{StainMatrix, WHITE};

#[derive(Debug, Clone, Copy)]
struct Disk {
    cx: f64,
    cy: f64,
    r: f64,
}

impl Disk {
    fn for_each_pixel(&self, w: usize, h: usize, mut f: impl FnMut(usize, usize)) {
        let x0 = (self.cx - self.r).floor().max(0.0) as usize;
        let y0 = (self.cy - self.r).floor().max(0.0) as usize;
        let x1 = ((self.cx + self.r).ceil() as usize + 1).min(w);
        let y1 = ((self.cy + self.r).ceil() as usize + 1).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 - self.cx, y as f64 - self.cy);
                if dx * dx + dy * dy <= self.r * self.r {
                    f(x, y);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlobPhantomParams {
    pub size: usize,
    pub resolution: Resolution,
    pub clusters: usize,
    pub disks_per_cluster: (usize, usize),
    pub disk_radius: (f64, f64),
    /// Largest gap between neighbouring disks of one cluster.
    pub max_gap: f64,
    /// Clusters keep this distance from the raster edge.
    pub margin: f64,
    pub dab_concentration: (f64, f64),
    pub nuclei: usize,
    pub salt_pixels: usize,
    pub noise: u8,
}

impl Default for BlobPhantomParams {
    fn default() -> Self {
        BlobPhantomParams {
            size: 2048,
            resolution: Resolution::SCAN_40X,
            clusters: 7,
            disks_per_cluster: (2, 5),
            disk_radius: (60.0, 140.0),
            max_gap: 20.0,
            margin: 160.0,
            dab_concentration: (0.6, 1.2),
            nuclei: 600,
            salt_pixels: 400,
            noise: 4,
        }
    }
}

/// IHC image with its epithelium ground truth.
#[derive(Debug, Clone)]
pub struct BlobPhantom {
    pub ihc: RasterImage,
    pub truth: BinaryMask,
}

/// White slide with DAB-stained islands, each built from a chain of disks
/// separated by small gaps, plus hematoxylin nuclei, isolated DAB specks and
/// additive intensity noise. Ground truth is the union of the DAB disks.
pub fn dab_blob_phantom(seed: u64, p: &BlobPhantomParams, stains: &StainMatrix) -> BlobPhantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.size;
    let mut hema = vec![0.0f64; n * n];
    let mut dab = vec![0.0f64; n * n];
    let mut truth = vec![false; n * n];

    let lo = p.margin + p.disk_radius.1;
    let hi = n as f64 - lo;
    for _ in 0..p.clusters {
        let level = rng.gen_range(p.dab_concentration.0..=p.dab_concentration.1);
        let count = rng.gen_range(p.disks_per_cluster.0..=p.disks_per_cluster.1);
        let mut prev = Disk {
            cx: rng.gen_range(lo..hi),
            cy: rng.gen_range(lo..hi),
            r: rng.gen_range(p.disk_radius.0..=p.disk_radius.1),
        };
        for i in 0..count {
            let disk = if i == 0 {
                prev
            } else {
                let r = rng.gen_range(p.disk_radius.0..=p.disk_radius.1);
                let dist = prev.r + r + rng.gen_range(0.0..p.max_gap);
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let cx =
                    (prev.cx + dist * angle.cos()).clamp(p.margin + r, n as f64 - p.margin - r);
                let cy =
                    (prev.cy + dist * angle.sin()).clamp(p.margin + r, n as f64 - p.margin - r);
                Disk { cx, cy, r }
            };
            disk.for_each_pixel(n, n, |x, y| {
                dab[y * n + x] = level;
                truth[y * n + x] = true;
            });
            prev = disk;
        }
    }
    for _ in 0..p.nuclei {
        let nucleus = Disk {
            cx: rng.gen_range(0.0..n as f64),
            cy: rng.gen_range(0.0..n as f64),
            r: rng.gen_range(3.0..7.0),
        };
        let level = rng.gen_range(0.5..1.0);
        nucleus.for_each_pixel(n, n, |x, y| hema[y * n + x] = level);
    }
    for _ in 0..p.salt_pixels {
        let i = rng.gen_range(0..n * n);
        if !truth[i] {
            dab[i] = 1.0;
        }
    }

    let h_index = stains.index_of("hematoxylin").unwrap_or(0);
    let d_index = stains.index_of("dab").unwrap_or(stains.len() - 1);
    let mut data = Vec::with_capacity(n * n * 3);
    let mut conc = vec![0.0; stains.len()];
    for i in 0..n * n {
        conc.fill(0.0);
        conc[h_index] = hema[i];
        conc[d_index] = dab[i];
        let od = stains.compose(&conc);
        for (c, v) in od.iter().enumerate() {
            let base = WHITE[c] as f64 * 10f64.powf(-v);
            let jitter = if p.noise > 0 {
                rng.gen_range(-(p.noise as f64)..=p.noise as f64)
            } else {
                0.0
            };
            data.push((base + jitter).round().clamp(0.0, 255.0) as u8);
        }
    }
    BlobPhantom {
        ihc: RasterImage::rgb8(n, n, p.resolution, data).expect("phantom dims"),
        truth: BinaryMask::from_bits(n, n, p.resolution, truth).expect("phantom dims"),
    }
}

/// Sum of random Gaussian bumps; smooth, deterministic per pixel.
#[derive(Debug, Clone)]
pub struct SmoothField {
    bumps: Vec<(f64, f64, f64, f64)>,
    bias: f64,
}

impl SmoothField {
    /// `bumps` Gaussians with centres in `[0, width) × [0, height)` and
    /// widths proportional to the raster size.
    pub fn new(seed: u64, width: usize, height: usize, bumps: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = width.max(height) as f64;
        let bumps = (0..bumps)
            .map(|_| {
                let cx = rng.gen_range(0.0..width as f64);
                let cy = rng.gen_range(0.0..height as f64);
                let s = rng.gen_range(0.05..0.2) * scale;
                let a = rng.gen_range(-1.0..2.0);
                (cx, cy, 1.0 / (2.0 * s * s), a)
            })
            .collect();
        SmoothField { bumps, bias: -0.5 }
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        self.bias
            + self
                .bumps
                .iter()
                .map(|&(cx, cy, inv, a)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) * inv).exp())
                .sum::<f64>()
    }

    /// Logistic squashing of the field into `[0, 1]`.
    pub fn probability(&self, x: f64, y: f64) -> f64 {
        1.0 / (1.0 + (-4.0 * self.value(x, y)).exp())
    }
}

/// Mask whose foreground is the top `fraction` of a smooth random field,
/// with exactly `round(fraction · w · h)` foreground pixels.
pub fn epithelium_field(
    seed: u64,
    width: usize,
    height: usize,
    fraction: f64,
    resolution: Resolution,
) -> BinaryMask {
    let field = SmoothField::new(seed, width, height, 24);
    let values: Vec<f64> = (0..width * height)
        .map(|i| field.value((i % width) as f64, (i / width) as f64))
        .collect();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let take = (fraction * values.len() as f64).round() as usize;
    let mut bits = vec![false; values.len()];
    for &i in &order[..take] {
        bits[i] = true;
    }
    BinaryMask::from_bits(width, height, resolution, bits).expect("dims")
}

/// `n` random boxes of 20–60 px inside a `width × height` frame with scores
/// uniform in `[0, 1]`.
pub fn random_detections(seed: u64, width: usize, height: usize, n: usize) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let w = rng.gen_range(20.0..60.0);
            let h = rng.gen_range(20.0..60.0);
            let x = rng.gen_range(0.0..width as f64 - w);
            let y = rng.gen_range(0.0..height as f64 - h);
            Detection::new(
                x.round(),
                y.round(),
                w.round(),
                h.round(),
                rng.gen_range(0.0..=1.0),
            )
            .expect("valid box")
        })
        .collect()
}
