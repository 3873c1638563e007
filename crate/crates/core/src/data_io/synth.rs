//! Synthetic fashion corpus whose captions determine the rendered images.
//!
//! Each item paints a garment silhouette whose position depends on its fashion symbol.
//! Colour fills the silhouette, length sets its height, style its width, season tints the
//! background, and the binary attributes draw stripes or a pocket.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{write_corpus, write_tmir, FashionRecord, Split, TmirTriple};
use super::image::RawImage;
use crate::error::{bail, Error, Result};
use crate::taxonomy::FashionSymbol;
use crate::textpipe::{BinaryAttribute, EnumAttribute};

pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.7, 0.2]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.95, 0.85, 0.1]),
    ("black", [0.05, 0.05, 0.05]),
    ("white", [0.98, 0.98, 0.98]),
    ("purple", [0.55, 0.15, 0.7]),
    ("orange", [1.0, 0.55, 0.05]),
];

pub const SEASONS: [(&str, [f32; 3]); 4] = [
    ("summer", [0.95, 0.9, 0.7]),
    ("winter", [0.7, 0.8, 0.95]),
    ("spring", [0.8, 0.95, 0.8]),
    ("autumn", [0.85, 0.75, 0.65]),
];

pub const LENGTHS: [&str; 2] = ["long", "short"];

/// Width change in pixels (at 32px) per style.
pub const STYLES: [(&str, i32); 3] = [("slim", -3), ("classic", 0), ("loose", 3)];

/// Category terms used by the generator, each mapping to a non-OTHERS symbol.
pub const CATEGORIES: [(&str, FashionSymbol); 12] = [
    ("shirt", FashionSymbol::Tops),
    ("sweater", FashionSymbol::Tops),
    ("dress", FashionSymbol::Dresses),
    ("skirt", FashionSymbol::Skirts),
    ("jacket", FashionSymbol::Coats),
    ("parka", FashionSymbol::Coats),
    ("jeans", FashionSymbol::Pants),
    ("shorts", FashionSymbol::Pants),
    ("boots", FashionSymbol::Shoes),
    ("sneakers", FashionSymbol::Shoes),
    ("clutches", FashionSymbol::Bags),
    ("hat", FashionSymbol::Accessories),
];

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_items: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Fraction of items placed in the test split.
    pub test_fraction: f64,
    /// Uniform pixel noise amplitude.
    pub noise: f32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_items: 200,
            seed: 0,
            image_size: 32,
            test_fraction: 0.2,
            noise: 0.03,
        }
    }
}

/// Visual attributes of one item.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemSpec {
    pub category: usize,
    pub style: usize,
    pub color: usize,
    pub length: usize,
    pub season: usize,
    pub striped: bool,
    pub pocket: bool,
}

impl ItemSpec {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            category: rng.random_range(0..CATEGORIES.len()),
            style: rng.random_range(0..STYLES.len()),
            color: rng.random_range(0..COLORS.len()),
            length: rng.random_range(0..LENGTHS.len()),
            season: rng.random_range(0..SEASONS.len()),
            striped: rng.random_bool(0.5),
            pocket: rng.random_bool(0.5),
        }
    }

    pub fn category_term(&self) -> &'static str {
        CATEGORIES[self.category].0
    }

    pub fn symbol(&self) -> FashionSymbol {
        CATEGORIES[self.category].1
    }

    pub fn subcategory(&self) -> String {
        format!("{} {}", STYLES[self.style].0, self.category_term())
    }

    pub fn caption(&self) -> String {
        let mut c = format!(
            "{} {} {} {}",
            COLORS[self.color].0,
            LENGTHS[self.length],
            STYLES[self.style].0,
            self.category_term()
        );
        if self.striped {
            c.push_str(" with stripes");
        }
        if self.pocket {
            c.push_str(" with a pocket");
        }
        c.push_str(" for ");
        c.push_str(SEASONS[self.season].0);
        c
    }

    pub fn enum_attrs(&self) -> Vec<EnumAttribute> {
        [
            ("color", COLORS[self.color].0),
            ("length", LENGTHS[self.length]),
            ("season", SEASONS[self.season].0),
        ]
        .into_iter()
        .map(|(n, v)| EnumAttribute {
            name: n.into(),
            value: v.into(),
        })
        .collect()
    }

    pub fn binary_attrs(&self) -> Vec<BinaryAttribute> {
        vec![
            BinaryAttribute {
                label: "striped".into(),
                present: self.striped,
            },
            BinaryAttribute {
                label: "pocket".into(),
                present: self.pocket,
            },
        ]
    }

    /// Pixel rectangles `(y0, y1, x0, x1)` of the garment at 32px scale.
    pub fn regions(&self) -> Vec<(i32, i32, i32, i32)> {
        let long = self.length == 0;
        let w = STYLES[self.style].1;
        let (y0, y1_long, y1_short, x0, x1) = match self.symbol() {
            FashionSymbol::Tops => (6, 20, 14, 8, 24),
            FashionSymbol::Coats => (3, 24, 16, 5, 27),
            FashionSymbol::Dresses => (4, 30, 20, 10, 22),
            FashionSymbol::Skirts => (15, 30, 23, 8, 24),
            FashionSymbol::Pants => (13, 31, 22, 9, 23),
            FashionSymbol::Shoes => (22, 30, 26, 4, 28),
            FashionSymbol::Bags => (10, 26, 18, 10, 22),
            FashionSymbol::Accessories | FashionSymbol::Others => (2, 12, 7, 10, 22),
        };
        let y1 = if long { y1_long } else { y1_short };
        let (x0, x1) = ((x0 - w).max(0), (x1 + w).min(32));
        match self.symbol() {
            // two legs / two shoes
            FashionSymbol::Pants | FashionSymbol::Shoes => {
                let mid = (x0 + x1) / 2;
                vec![(y0, y1, x0, mid - 1), (y0, y1, mid + 1, x1)]
            }
            _ => vec![(y0, y1, x0, x1)],
        }
    }

    /// Renders the item at `size` pixels; `noise` adds seeded uniform jitter.
    pub fn render<R: Rng + ?Sized>(&self, size: usize, noise: f32, rng: &mut R) -> RawImage {
        let bg = SEASONS[self.season].1;
        let fg = COLORS[self.color].1;
        let mut img = RawImage::filled(size, size, bg);
        let scale = size as f32 / 32.0;
        let px = |v: i32| ((v as f32 * scale).round() as usize).min(size);
        let regions = self.regions();
        for &(y0, y1, x0, x1) in &regions {
            for y in px(y0)..px(y1) {
                let stripe = self.striped && ((y - px(y0)) / (2.0 * scale).max(1.0) as usize) % 2 == 1;
                for x in px(x0)..px(x1) {
                    let c = if stripe { fg.map(|v| v * 0.45) } else { fg };
                    img.set(y, x, c);
                }
            }
        }
        if self.pocket {
            let (y0, y1, x0, x1) = regions[0];
            let cy = (y0 + y1) / 2;
            let cx = (x0 + x1) / 2;
            for y in px(cy)..px(cy + 4).min(px(y1)) {
                for x in px(cx - 2)..px(cx + 2) {
                    img.set(y, x, [0.5, 0.5, 0.5]);
                }
            }
        }
        if noise > 0.0 {
            for y in 0..size {
                for x in 0..size {
                    let c = img.get(y, x).map(|v| (v + rng.random_range(-noise..=noise)).clamp(0.0, 1.0));
                    img.set(y, x, c);
                }
            }
        }
        img
    }
}

/// An in-memory synthetic corpus.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub items: Vec<ItemSpec>,
    pub records: Vec<FashionRecord>,
    pub images: Vec<RawImage>,
    pub triples: Vec<TmirTriple>,
    pub target_images: Vec<RawImage>,
}

const TMIR_TEMPLATES: [&str; 3] = ["make it {}", "change the color to {}", "i want it in {}"];

/// Deterministically generates `spec.n_items` records, images and one modification triple
/// per item.
pub fn synthesize(spec: &SynthSpec) -> Result<SynthCorpus> {
    if spec.n_items < 2 {
        bail!(InvalidConfig, "synthetic corpus needs at least 2 items, got {}", spec.n_items);
    }
    if spec.image_size == 0 || !(0.0..1.0).contains(&spec.test_fraction) {
        bail!(InvalidConfig, "invalid image_size or test_fraction");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_test = (spec.n_items as f64 * spec.test_fraction).round() as usize;
    let mut out = SynthCorpus {
        items: Vec::new(),
        records: Vec::new(),
        images: Vec::new(),
        triples: Vec::new(),
        target_images: Vec::new(),
    };
    for i in 0..spec.n_items {
        let item = ItemSpec::random(&mut rng);
        let id = format!("item{i:05}");
        let split = if i >= spec.n_items - n_test { Split::Test } else { Split::Train };
        let image = item.render(spec.image_size, spec.noise, &mut rng);

        let mut target = item.clone();
        target.color = (item.color + rng.random_range(1..COLORS.len())) % COLORS.len();
        let target_image = target.render(spec.image_size, spec.noise, &mut rng);
        let template = TMIR_TEMPLATES.choose(&mut rng).expect("non-empty");
        let target_id = format!("{id}-{}", COLORS[target.color].0);
        out.triples.push(TmirTriple {
            candidate_id: id.clone(),
            candidate_image: format!("{id}.fsapimg"),
            target_image: format!("{target_id}.fsapimg"),
            target_id,
            text: template.replace("{}", COLORS[target.color].0),
            split,
        });
        out.target_images.push(target_image);

        out.records.push(FashionRecord {
            item_id: id.clone(),
            caption: item.caption(),
            category: item.category_term().to_string(),
            subcategory: item.subcategory(),
            enum_attrs: item.enum_attrs(),
            binary_attrs: item.binary_attrs(),
            image_ref: format!("{id}.fsapimg"),
            split,
        });
        out.images.push(image);
        out.items.push(item);
    }
    Ok(out)
}

/// File locations written by [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SynthPaths {
    pub corpus: PathBuf,
    pub tmir: PathBuf,
    pub image_dir: PathBuf,
}

/// Writes `corpus.jsonl`, `tmir.jsonl` and `images/*.fsapimg` under `out_dir`.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<SynthPaths> {
    let corpus = synthesize(spec)?;
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    for (r, img) in corpus.records.iter().zip(&corpus.images) {
        img.save(&image_dir.join(&r.image_ref))?;
    }
    for (t, img) in corpus.triples.iter().zip(&corpus.target_images) {
        img.save(&image_dir.join(&t.target_image))?;
    }
    let paths = SynthPaths {
        corpus: out_dir.join("corpus.jsonl"),
        tmir: out_dir.join("tmir.jsonl"),
        image_dir,
    };
    write_corpus(&paths.corpus, &corpus.records)?;
    write_tmir(&paths.tmir, &corpus.triples)?;
    Ok(paths)
}
