//! Identity similarity, palette attribute readout and the ablation table.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::render::classify_pixel;
use crate::data::{Color, Image, Scenario, SubjectSpec, TestCase};
use crate::error::{Error, Result};
use crate::model::{Model, RoutingOptions};
use crate::sampler::{sample, SampleRequest};

/// Common grid for identity comparisons.
pub const ID_EDGE: usize = 16;
const ID_PATCH: usize = 4;
const ID_DIM: usize = 256;
const ID_SEED: u64 = 0x1d_e0_71_7e;
/// Smallest blob, in pixels, that counts as a subject.
pub const MIN_BLOB: usize = 6;

fn projection() -> &'static Vec<f32> {
    static P: std::sync::OnceLock<Vec<f32>> = std::sync::OnceLock::new();
    P.get_or_init(|| {
        let per_patch = ID_DIM / ((ID_EDGE / ID_PATCH) * (ID_EDGE / ID_PATCH));
        let mut rng = ChaCha8Rng::seed_from_u64(ID_SEED);
        (0..ID_PATCH * ID_PATCH * 3 * per_patch)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    })
}

fn fit(image: &Image) -> Image {
    if image.width == ID_EDGE && image.height == ID_EDGE {
        image.clone()
    } else if image.width.is_multiple_of(ID_EDGE) && image.height.is_multiple_of(ID_EDGE) {
        image.downscale(image.width / ID_EDGE, image.height / ID_EDGE).expect("divisible")
    } else {
        image.resize_nearest(ID_EDGE, ID_EDGE)
    }
}

/// 256-dim embedding: each 4×4 patch of the mean-centered 16×16 image goes
/// through one shared seeded Gaussian projection.
pub fn identity_embedding(image: &Image) -> Vec<f32> {
    let img = fit(image);
    let mean = img.data.iter().sum::<f32>() / img.data.len() as f32;
    let p = projection();
    let grid = ID_EDGE / ID_PATCH;
    let per_patch = ID_DIM / (grid * grid);
    let pd = ID_PATCH * ID_PATCH * 3;
    let mut out = Vec::with_capacity(ID_DIM);
    for gy in 0..grid {
        for gx in 0..grid {
            let mut raw = Vec::with_capacity(pd);
            for py in 0..ID_PATCH {
                for px in 0..ID_PATCH {
                    raw.extend(img.pixel(gx * ID_PATCH + px, gy * ID_PATCH + py).map(|v| v - mean));
                }
            }
            for o in 0..per_patch {
                out.push((0..pd).map(|i| raw[i] * p[i * per_patch + o]).sum());
            }
        }
    }
    out
}

/// Cosine similarity of identity embeddings; 0 when either side is degenerate.
pub fn identity_similarity(a: &Image, b: &Image) -> f32 {
    let (ea, eb) = (identity_embedding(a), identity_embedding(b));
    let dot: f64 = ea.iter().zip(&eb).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = ea.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = eb.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0) as f32
}

/// How condition regions are located in a generated image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionMode {
    /// Condition `k` owns the `k`-th of `c` equal vertical stripes.
    Columns,
    /// Connected same-color components, matched to conditions by color.
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEntry {
    pub condition: usize,
    /// `None` when no subject-like region was found.
    pub region: Option<BoundingBox>,
    pub dominant: Option<Color>,
    /// Fraction of region pixels notably darker than the region median.
    pub texture_score: f32,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub entries: Vec<RegionEntry>,
}

impl RegionReport {
    pub fn match_rate(&self) -> f32 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().filter(|e| e.matched).count() as f32 / self.entries.len() as f32
    }
}

fn brightness(p: [f32; 3]) -> f32 {
    p[0].max(p[1]).max(p[2])
}

fn texture_score(image: &Image, pixels: &[(usize, usize)]) -> f32 {
    if pixels.is_empty() {
        return 0.0;
    }
    let mut v: Vec<f32> = pixels.iter().map(|&(x, y)| brightness(image.pixel(x, y))).collect();
    v.sort_by(f32::total_cmp);
    let median = v[v.len() / 2];
    v.iter().filter(|&&b| b < 0.8 * median).count() as f32 / v.len() as f32
}

fn dominant(image: &Image, pixels: impl Iterator<Item = (usize, usize)>) -> (Option<Color>, Vec<(usize, usize)>) {
    let mut counts = [0usize; 8];
    let mut colored = Vec::new();
    for (x, y) in pixels {
        if let Some(c) = classify_pixel(image.pixel(x, y)) {
            counts[c.index()] += 1;
            colored.push((x, y));
        }
    }
    let best = (0..8).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).filter(|&i| counts[i] > 0);
    (best.map(|i| Color::ALL[i]), colored)
}

struct Blob {
    color: Color,
    pixels: Vec<(usize, usize)>,
    bbox: BoundingBox,
}

fn blobs(image: &Image) -> Vec<Blob> {
    let (w, h) = (image.width, image.height);
    let labels: Vec<Option<Color>> = (0..w * h).map(|i| classify_pixel(image.pixel(i % w, i / w))).collect();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        let Some(color) = labels[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            pixels.push((x, y));
            let mut push = |j: usize| {
                if !seen[j] && labels[j] == Some(color) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        if pixels.len() < MIN_BLOB {
            continue;
        }
        let bbox = BoundingBox {
            x0: pixels.iter().map(|p| p.0).min().expect("nonempty"),
            y0: pixels.iter().map(|p| p.1).min().expect("nonempty"),
            x1: pixels.iter().map(|p| p.0).max().expect("nonempty") + 1,
            y1: pixels.iter().map(|p| p.1).max().expect("nonempty") + 1,
        };
        out.push(Blob { color, pixels, bbox });
    }
    out.sort_by_key(|b| std::cmp::Reverse(b.pixels.len()));
    out
}

/// Reads each condition's region and compares its dominant palette color to the spec.
pub fn attribute_match(image: &Image, specs: &[SubjectSpec], mode: RegionMode) -> RegionReport {
    let c = specs.len();
    let entries = match mode {
        RegionMode::Columns => specs
            .iter()
            .enumerate()
            .map(|(k, spec)| {
                let x0 = k * image.width / c;
                let x1 = (k + 1) * image.width / c;
                let all = (0..image.height).flat_map(|y| (x0..x1).map(move |x| (x, y)));
                let (dom, colored) = dominant(image, all);
                RegionEntry {
                    condition: k,
                    region: Some(BoundingBox {
                        x0,
                        y0: 0,
                        x1,
                        y1: image.height,
                    }),
                    dominant: dom,
                    texture_score: texture_score(image, &colored),
                    matched: dom == Some(spec.color),
                }
            })
            .collect(),
        RegionMode::Blobs => {
            let found = blobs(image);
            let mut used = vec![false; found.len()];
            let mut entries: Vec<Option<RegionEntry>> = vec![None; c];
            // first pass: the largest blob of each spec's own color
            for (k, spec) in specs.iter().enumerate() {
                if let Some(i) = (0..found.len()).find(|&i| !used[i] && found[i].color == spec.color) {
                    used[i] = true;
                    entries[k] = Some(RegionEntry {
                        condition: k,
                        region: Some(found[i].bbox),
                        dominant: Some(found[i].color),
                        texture_score: texture_score(image, &found[i].pixels),
                        matched: true,
                    });
                }
            }
            // second pass: unmatched specs report the largest leftover blob
            for (k, slot) in entries.iter_mut().enumerate() {
                if slot.is_some() {
                    continue;
                }
                let leftover = (0..found.len()).find(|&i| !used[i]);
                *slot = Some(match leftover {
                    Some(i) => {
                        used[i] = true;
                        RegionEntry {
                            condition: k,
                            region: Some(found[i].bbox),
                            dominant: Some(found[i].color),
                            texture_score: texture_score(image, &found[i].pixels),
                            matched: false,
                        }
                    }
                    None => RegionEntry {
                        condition: k,
                        region: None,
                        dominant: None,
                        texture_score: 0.0,
                        matched: false,
                    },
                });
            }
            entries.into_iter().map(|e| e.expect("filled")).collect()
        }
    };
    RegionReport { entries }
}

/// Mean identity similarity between each located region and its reference.
pub fn case_identity(image: &Image, report: &RegionReport, references: &[Image]) -> f32 {
    if references.is_empty() {
        return 0.0;
    }
    let total: f32 = report
        .entries
        .iter()
        .zip(references)
        .map(|(e, r)| match e.region {
            Some(b) if e.matched => identity_similarity(&image.crop(b.x0, b.y0, b.width(), b.height()), r),
            _ => identity_similarity(image, r),
        })
        .sum();
    total / references.len() as f32
}

/// A model plus the routing it is evaluated under.
pub struct Variant<'a> {
    pub name: String,
    pub model: &'a Model,
    pub routing: RoutingOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub variant: String,
    pub scenario: String,
    /// Sampling seed, or `"all"` for a summary row.
    pub seed: String,
    pub identity_sim: f32,
    pub attr_match: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteOptions {
    pub seeds: usize,
    pub steps: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { seeds: 4, steps: 20 }
    }
}

/// Samples every case under every variant and seed; one row per
/// (variant, scenario, seed) averaged over cases.
pub fn eval_suite(variants: &[Variant], cases: &[TestCase], opts: &SuiteOptions) -> Result<Vec<MetricRow>> {
    if cases.is_empty() {
        return Err(Error::Data("no test cases".into()));
    }
    let mut rows = Vec::new();
    for v in variants {
        let mut acc: BTreeMap<(Scenario, usize), (f32, f32, usize)> = BTreeMap::new();
        for (ci, case) in cases.iter().enumerate() {
            for seed in 0..opts.seeds {
                let mut req = SampleRequest::new(case.conditions.clone(), case.prompt.clone(), case.spans.clone());
                req.steps = opts.steps;
                req.seed = (ci * 1000 + seed) as u64;
                req.routing = v.routing;
                let (img, _) = sample(v.model, &req)?;
                let report = attribute_match(&img, &case.specs, RegionMode::Blobs);
                let refs: Vec<Image> = case.conditions.iter().map(|c| c.image.clone()).collect();
                let id = case_identity(&img, &report, &refs);
                let e = acc.entry((case.scenario, seed)).or_insert((0.0, 0.0, 0));
                e.0 += id;
                e.1 += report.match_rate();
                e.2 += 1;
            }
        }
        for ((scenario, seed), (id, attr, n)) in acc {
            rows.push(MetricRow {
                variant: v.name.clone(),
                scenario: scenario.name().into(),
                seed: seed.to_string(),
                identity_sim: id / n as f32,
                attr_match: attr / n as f32,
            });
        }
    }
    Ok(rows)
}

/// One row per (variant, scenario), averaging the per-seed rows.
pub fn summarize(rows: &[MetricRow]) -> Vec<MetricRow> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut acc: BTreeMap<(String, String), (f32, f32, usize)> = BTreeMap::new();
    for r in rows {
        let key = (r.variant.clone(), r.scenario.clone());
        if !acc.contains_key(&key) {
            order.push(key.clone());
        }
        let e = acc.entry(key).or_insert((0.0, 0.0, 0));
        e.0 += r.identity_sim;
        e.1 += r.attr_match;
        e.2 += 1;
    }
    order
        .into_iter()
        .map(|key| {
            let (id, attr, n) = acc[&key];
            MetricRow {
                variant: key.0,
                scenario: key.1,
                seed: "all".into(),
                identity_sim: id / n as f32,
                attr_match: attr / n as f32,
            }
        })
        .collect()
}

pub fn write_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut text = String::from("variant,scenario,seed,identity_sim,attr_match\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.variant, r.scenario, r.seed, r.identity_sim, r.attr_match
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::diptych::{make_diptych, random_specs, render_subject, render_target};
    use crate::data::{Category, Extents, Texture};
    use rand::Rng;

    fn spec(category: Category, color: Color, seed: u64) -> SubjectSpec {
        SubjectSpec {
            category,
            color,
            texture: Texture::Striped,
            seed,
        }
    }

    #[test]
    fn identity_basics() {
        let a = render_target(&spec(Category::Ball, Color::Red, 1), 32, 0);
        assert!((identity_similarity(&a, &a) - 1.0).abs() < 1e-6);
        let neg = Image::new(32, 32, a.data.iter().map(|v| -v).collect()).unwrap();
        assert!((identity_similarity(&a, &neg) + 1.0).abs() < 1e-6);
        let zero = Image::filled(32, 32, [0.0; 3]);
        assert_eq!(identity_similarity(&a, &zero), 0.0);
        let b = render_target(&spec(Category::Cup, Color::Blue, 2), 32, 1);
        assert_eq!(identity_similarity(&a, &b), identity_similarity(&b, &a));
    }

    #[test]
    fn same_color_is_more_similar_across_corpus() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let specs = random_specs(200, &mut rng);
        let mut wins = 0;
        for s in &specs {
            let base = render_target(s, 32, 0);
            let again = render_target(s, 32, 0);
            let mut other = *s;
            other.color = Color::ALL[(s.color.index() + rng.gen_range(1..8)) % 8];
            let recolored = render_target(&other, 32, 0);
            if identity_similarity(&base, &recolored) < identity_similarity(&base, &again) {
                wins += 1;
            }
        }
        assert!(wins * 100 >= 95 * specs.len(), "{wins}/{}", specs.len());
    }

    #[test]
    fn ground_truth_diptychs_match_fully() {
        let e = Extents::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let specs = random_specs(2, &mut rng);
            if specs[0].color == specs[1].color || specs[0] == specs[1] {
                continue;
            }
            let a = render_subject(&specs[0], e, 0);
            let b = render_subject(&specs[1], e, 1);
            let d = make_diptych(&a, &b).unwrap();
            assert_eq!(attribute_match(&d.target, &d.specs, RegionMode::Columns).match_rate(), 1.0);
            assert_eq!(attribute_match(&d.target, &d.specs, RegionMode::Blobs).match_rate(), 1.0);
            let swapped = [d.specs[1], d.specs[0]];
            assert_eq!(attribute_match(&d.target, &swapped, RegionMode::Columns).match_rate(), 0.0);
        }
    }

    #[test]
    fn noise_matches_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = 1000;
        let mut hits = 0;
        let mut total = 0;
        for _ in 0..trials {
            let img = Image::new(32, 32, (0..32 * 32 * 3).map(|_| rng.gen()).collect()).unwrap();
            let specs = random_specs(2, &mut rng);
            let r = attribute_match(&img, &specs, RegionMode::Columns);
            hits += r.entries.iter().filter(|e| e.matched).count();
            total += r.entries.len();
        }
        let rate = hits as f32 / total as f32;
        let chance = 1.0 / Color::ALL.len() as f32;
        assert!((rate - chance).abs() <= 0.1 * chance, "{rate}");
    }

    #[test]
    fn blank_image_reports_no_region() {
        let img = Image::filled(32, 32, [0.5; 3]);
        let r = attribute_match(&img, &[spec(Category::Kite, Color::Pink, 0)], RegionMode::Blobs);
        assert_eq!(r.entries[0].region, None);
        assert!(!r.entries[0].matched);
    }

    #[test]
    fn summary_collapses_seeds() {
        let row = |seed: &str, v: f32| MetricRow {
            variant: "full".into(),
            scenario: "c1".into(),
            seed: seed.into(),
            identity_sim: v,
            attr_match: v,
        };
        let s = summarize(&[row("0", 0.2), row("1", 0.4)]);
        assert_eq!(s.len(), 1);
        assert!((s[0].attr_match - 0.3).abs() < 1e-6);
    }
}
