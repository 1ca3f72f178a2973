//! Synthetic shapes corpus for small-scale experiments.
//!
//! Every image shows one to three copies of a single shape in one color above
//! a colored floor band. Images are drawn from one distribution regardless of
//! category; the category only picks which question is asked about the image,
//! so the question family cannot be read off the pixels alone.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, Record, Source, SplitSpec};
use crate::error::{Error, Result};
use crate::tensor::{io, Tensor};
use crate::text::tokenize;

pub const FAMILIES: [&str; 8] = [
    "shape", "color", "count", "position", "size", "binary", "floor", "vertical",
];
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const COUNTS: [&str; 3] = ["one", "two", "three"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub n_categories: usize,
    pub images_per_cat: usize,
    /// Image side length in pixels.
    pub grid: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            n_categories: 8,
            images_per_cat: 60,
            grid: 32,
            seed: 0,
        }
    }
}

/// Rendering constants the checker needs to invert the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckerRules {
    pub grid: usize,
    pub floor_rows: usize,
    pub background: [f32; 3],
    pub palette: Vec<(String, [f32; 3])>,
    pub shapes: Vec<String>,
    pub radius_small: usize,
    pub radius_big: usize,
    /// Minimum distance of the shape centroid from the horizontal or vertical midline.
    pub margin: f32,
}

impl CheckerRules {
    pub fn for_grid(grid: usize) -> Self {
        CheckerRules {
            grid,
            floor_rows: grid / 8,
            background: [0.05, 0.05, 0.05],
            palette: vec![
                ("red".into(), [0.9, 0.1, 0.1]),
                ("green".into(), [0.1, 0.8, 0.1]),
                ("blue".into(), [0.1, 0.2, 0.9]),
                ("yellow".into(), [0.9, 0.9, 0.1]),
            ],
            shapes: SHAPES.iter().map(|s| s.to_string()).collect(),
            radius_small: (grid / 10).max(2),
            radius_big: (grid / 6).max(3),
            margin: 2.0,
        }
    }

    fn rgb(&self, color: usize) -> [f32; 3] {
        self.palette[color].1
    }

    /// Height of the area above the floor band.
    fn field(&self) -> usize {
        self.grid - self.floor_rows
    }
}

/// Whether offset `(dy, dx)` from the center lies inside `shape` of radius `r`.
pub fn shape_mask(shape: usize, r: i64, dy: i64, dx: i64) -> bool {
    if dy.abs() > r || dx.abs() > r {
        return false;
    }
    match shape {
        0 => dy * dy + dx * dx <= r * r,
        1 => true,
        // apex at the top, base on the bottom row
        2 => 2 * dx.abs() <= dy + r,
        _ => {
            let t = (r / 3).max(1);
            dx.abs() <= t || dy.abs() <= t
        }
    }
}

/// Latent content of one rendered image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shape: usize,
    pub color: usize,
    pub floor: usize,
    pub big: bool,
    pub centers: Vec<(i64, i64)>,
}

impl Scene {
    fn radius(&self, rules: &CheckerRules) -> i64 {
        (if self.big { rules.radius_big } else { rules.radius_small }) as i64
    }

    fn centroid(&self) -> (f32, f32) {
        let n = self.centers.len() as f32;
        let y = self.centers.iter().map(|c| c.0 as f32).sum::<f32>() / n;
        let x = self.centers.iter().map(|c| c.1 as f32).sum::<f32>() / n;
        (y, x)
    }

    pub fn render(&self, rules: &CheckerRules) -> Tensor {
        let g = rules.grid;
        let mut data = vec![0f32; 3 * g * g];
        let put = |data: &mut Vec<f32>, y: usize, x: usize, rgb: [f32; 3]| {
            for (ch, v) in rgb.iter().enumerate() {
                data[ch * g * g + y * g + x] = *v;
            }
        };
        let floor_rgb = rules.rgb(self.floor);
        let color_rgb = rules.rgb(self.color);
        let r = self.radius(rules);
        for y in 0..g {
            for x in 0..g {
                let rgb = if y >= rules.field() {
                    floor_rgb
                } else if self
                    .centers
                    .iter()
                    .any(|&(cy, cx)| shape_mask(self.shape, r, y as i64 - cy, x as i64 - cx))
                {
                    color_rgb
                } else {
                    rules.background
                };
                put(&mut data, y, x, rgb);
            }
        }
        Tensor::new(&[3, g, g], data).expect("well-formed image")
    }
}

fn sample_scene<R: Rng + ?Sized>(rules: &CheckerRules, rng: &mut R) -> Scene {
    let field = rules.field() as i64;
    let g = rules.grid as i64;
    loop {
        let big = rng.gen_bool(0.5);
        let r = if big { rules.radius_big } else { rules.radius_small } as i64;
        let n = rng.gen_range(1..=3);
        let mut centers: Vec<(i64, i64)> = Vec::new();
        let mut tries = 0;
        while centers.len() < n && tries < 200 {
            tries += 1;
            let c = (rng.gen_range(r..field - r), rng.gen_range(r..g - r));
            // boxes at least one pixel apart so copies stay separate components
            if centers
                .iter()
                .all(|o| (o.0 - c.0).abs() > 2 * r + 1 || (o.1 - c.1).abs() > 2 * r + 1)
            {
                centers.push(c);
            }
        }
        if centers.len() < n {
            continue;
        }
        let scene = Scene {
            shape: rng.gen_range(0..SHAPES.len()),
            color: rng.gen_range(0..COLORS.len()),
            floor: rng.gen_range(0..COLORS.len()),
            big,
            centers,
        };
        let (cy, cx) = scene.centroid();
        let mid_x = (g - 1) as f32 / 2.0;
        let mid_y = (field - 1) as f32 / 2.0;
        if (cx - mid_x).abs() >= rules.margin && (cy - mid_y).abs() >= rules.margin {
            return scene;
        }
    }
}

fn plural(shape: &str) -> String {
    match shape {
        "cross" => "crosses".into(),
        s => format!("{s}s"),
    }
}

/// Question and answer of `family` about `scene`.
pub fn question_answer<R: Rng + ?Sized>(
    family: &str,
    scene: &Scene,
    rules: &CheckerRules,
    rng: &mut R,
) -> (String, String) {
    let shape = SHAPES[scene.shape];
    let (cy, cx) = scene.centroid();
    match family {
        "shape" => ("what shape is shown?".into(), shape.into()),
        "color" => (format!("what color is the {shape}?"), COLORS[scene.color].into()),
        "count" => (
            format!("how many {} are there?", plural(shape)),
            COUNTS[scene.centers.len() - 1].into(),
        ),
        "position" => {
            let side = if cx < (rules.grid - 1) as f32 / 2.0 { "left" } else { "right" };
            (format!("is the {shape} on the left or right?"), side.into())
        }
        "size" => (
            format!("is the {shape} small or big?"),
            if scene.big { "big" } else { "small" }.into(),
        ),
        "binary" => {
            let asked = if rng.gen_bool(0.5) {
                scene.color
            } else {
                let others: Vec<usize> = (0..COLORS.len()).filter(|&c| c != scene.color).collect();
                *others.choose(rng).expect("palette has several colors")
            };
            let yes = asked == scene.color;
            (
                format!("is the {shape} {}?", COLORS[asked]),
                if yes { "yes" } else { "no" }.into(),
            )
        }
        "floor" => ("what color is the floor?".into(), COLORS[scene.floor].into()),
        _ => {
            let high = cy < (rules.field() - 1) as f32 / 2.0;
            (
                format!("is the {shape} high or low?"),
                if high { "high" } else { "low" }.into(),
            )
        }
    }
}

/// Train categories come first; the last `n / 2` families are held out.
pub fn toy_split(n_categories: usize) -> SplitSpec {
    let n_test = n_categories / 2;
    let fams = &FAMILIES[..n_categories];
    SplitSpec {
        train_categories: fams[..n_categories - n_test].iter().map(|s| s.to_string()).collect(),
        test_categories: fams[n_categories - n_test..].iter().map(|s| s.to_string()).collect(),
    }
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const RULES_FILE: &str = "checker_rules.json";
pub const SPLIT_FILE: &str = "splitspec.json";
pub const IMAGE_DIR: &str = "images";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Renders the corpus into `out_dir`: `images/*.tnsr`, `manifest.jsonl`,
/// `checker_rules.json` and `splitspec.json`.
pub fn generate_toyset(spec: &ToySpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    if spec.n_categories < 4 || spec.n_categories > FAMILIES.len() {
        return Err(Error::Config(format!(
            "n_categories must be between 4 and {}, got {}",
            FAMILIES.len(),
            spec.n_categories
        )));
    }
    if spec.images_per_cat == 0 {
        return Err(Error::Config("images_per_cat must be positive".into()));
    }
    if spec.grid < 24 {
        return Err(Error::Config(format!("grid {} is below 24 pixels", spec.grid)));
    }
    let out = out_dir.as_ref();
    let images = out.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let rules = CheckerRules::for_grid(spec.grid);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.n_categories * spec.images_per_cat);
    for (c, family) in FAMILIES[..spec.n_categories].iter().enumerate() {
        for k in 0..spec.images_per_cat {
            let idx = c * spec.images_per_cat + k;
            let scene = sample_scene(&rules, &mut rng);
            let (question, answer) = question_answer(family, &scene, &rules, &mut rng);
            let id = format!("toy{idx:05}");
            let image_ref = format!("{IMAGE_DIR}/{id}.tnsr");
            io::write(out.join(&image_ref), &scene.render(&rules))?;
            records.push(Record {
                image_id: id,
                image_ref,
                question,
                answer,
                answer_category: family.to_string(),
                question_category: None,
                source: Source::A,
            });
        }
    }
    let manifest = Manifest::new(records);
    manifest.save(out.join(MANIFEST_FILE))?;
    write_json(&out.join(RULES_FILE), &rules)?;
    write_json(&out.join(SPLIT_FILE), &toy_split(spec.n_categories))?;
    Ok(manifest)
}

/// What the checker reads back from an image.
#[derive(Clone, Debug, PartialEq)]
pub struct Reading {
    pub shape: String,
    pub color: String,
    pub floor: String,
    pub count: usize,
    pub big: bool,
    pub centroid: (f32, f32),
}

fn nearest_color(rules: &CheckerRules, rgb: [f32; 3]) -> Option<usize> {
    rules.palette.iter().position(|(_, p)| {
        p.iter().zip(rgb).all(|(a, b)| (a - b).abs() < 1e-3)
    })
}

/// Recovers the scene content from pixels alone.
pub fn read_image(rules: &CheckerRules, img: &Tensor) -> Result<Reading> {
    let g = rules.grid;
    if img.shape() != [3, g, g] {
        return Err(Error::Data(format!("image shape {:?}, want [3, {g}, {g}]", img.shape())));
    }
    let px = |y: usize, x: usize| [img.get(&[0, y, x]), img.get(&[1, y, x]), img.get(&[2, y, x])];
    let floor = nearest_color(rules, px(g - 1, 0))
        .ok_or_else(|| Error::Data("floor color not in palette".into()))?;
    let field = rules.field();
    let fg: Vec<bool> = (0..field * g)
        .map(|i| {
            let p = px(i / g, i % g);
            p.iter().zip(rules.background).any(|(a, b)| (a - b).abs() > 1e-3)
        })
        .collect();
    let mut seen = vec![false; field * g];
    let mut components: Vec<Vec<(usize, usize)>> = Vec::new();
    for start in 0..field * g {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            let (y, x) = (i / g, i % g);
            comp.push((y, x));
            let mut nb = Vec::with_capacity(4);
            if y > 0 {
                nb.push(i - g);
            }
            if y + 1 < field {
                nb.push(i + g);
            }
            if x > 0 {
                nb.push(i - 1);
            }
            if x + 1 < g {
                nb.push(i + 1);
            }
            for j in nb {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        components.push(comp);
    }
    let first = components
        .first()
        .ok_or_else(|| Error::Data("no shape found".into()))?;
    let color = nearest_color(rules, px(first[0].0, first[0].1))
        .ok_or_else(|| Error::Data("shape color not in palette".into()))?;
    let mut shape_seen = None;
    let mut big_seen = None;
    let mut centers = Vec::new();
    for comp in &components {
        let (y0, y1) = (comp.iter().map(|p| p.0).min().unwrap(), comp.iter().map(|p| p.0).max().unwrap());
        let (x0, x1) = (comp.iter().map(|p| p.1).min().unwrap(), comp.iter().map(|p| p.1).max().unwrap());
        if y1 - y0 != x1 - x0 || (y1 - y0) % 2 != 0 {
            return Err(Error::Data("component bounding box is not an odd square".into()));
        }
        let r = ((y1 - y0) / 2) as i64;
        let (cy, cx) = ((y0 + y1) / 2, (x0 + x1) / 2);
        let cells: BTreeSet<(usize, usize)> = comp.iter().copied().collect();
        let shape = (0..SHAPES.len())
            .find(|&s| {
                (-r..=r).all(|dy| {
                    (-r..=r).all(|dx| {
                        let p = ((cy as i64 + dy) as usize, (cx as i64 + dx) as usize);
                        shape_mask(s, r, dy, dx) == cells.contains(&p)
                    })
                })
            })
            .ok_or_else(|| Error::Data("component matches no shape template".into()))?;
        let big = if r as usize == rules.radius_big {
            true
        } else if r as usize == rules.radius_small {
            false
        } else {
            return Err(Error::Data(format!("unexpected shape radius {r}")));
        };
        if shape_seen.replace(shape).is_some_and(|s| s != shape)
            || big_seen.replace(big).is_some_and(|b| b != big)
        {
            return Err(Error::Data("copies differ in shape or size".into()));
        }
        centers.push((cy as f32, cx as f32));
    }
    let n = centers.len() as f32;
    Ok(Reading {
        shape: SHAPES[shape_seen.expect("at least one component")].into(),
        color: COLORS[color].into(),
        floor: COLORS[floor].into(),
        count: components.len(),
        big: big_seen.expect("at least one component"),
        centroid: (
            centers.iter().map(|c| c.0).sum::<f32>() / n,
            centers.iter().map(|c| c.1).sum::<f32>() / n,
        ),
    })
}

/// Whether a record's question and answer agree with its image.
pub fn check_record(rules: &CheckerRules, img: &Tensor, r: &Record) -> Result<bool> {
    let read = read_image(rules, img)?;
    let q = tokenize(&r.question);
    let mentions_shape =
        |s: &str| q.iter().any(|t| *t == s || *t == plural(s));
    if r.answer_category != "shape" && r.answer_category != "floor" && !mentions_shape(&read.shape) {
        return Ok(false);
    }
    let (cy, cx) = read.centroid;
    let expected = match r.answer_category.as_str() {
        "shape" => read.shape.clone(),
        "color" | "floor" => {
            if r.answer_category == "color" { read.color.clone() } else { read.floor.clone() }
        }
        "count" => COUNTS
            .get(read.count.wrapping_sub(1))
            .ok_or_else(|| Error::Data(format!("{} shapes", read.count)))?
            .to_string(),
        "position" => if cx < (rules.grid - 1) as f32 / 2.0 { "left" } else { "right" }.into(),
        "size" => if read.big { "big" } else { "small" }.into(),
        "binary" => {
            let asked = q
                .iter()
                .find(|t| COLORS.contains(&t.as_str()))
                .ok_or_else(|| Error::Data("binary question names no color".into()))?;
            if *asked == read.color { "yes" } else { "no" }.into()
        }
        "vertical" => if cy < (rules.field() - 1) as f32 / 2.0 { "high" } else { "low" }.into(),
        other => return Err(Error::Data(format!("unknown toy category {other}"))),
    };
    Ok(expected == r.answer)
}

/// Loads the checker rules and validates every record of a generated corpus.
/// Returns the number of records that fail.
pub fn check_toyset(dir: impl AsRef<Path>) -> Result<usize> {
    let dir = dir.as_ref();
    let path = dir.join(RULES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let rules: CheckerRules = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let (manifest, _) = Manifest::load(dir.join(MANIFEST_FILE))?;
    let mut failures = 0;
    for r in &manifest.records {
        let img = io::read(dir.join(&r.image_ref))?;
        if !check_record(&rules, &img, r)? {
            failures += 1;
        }
    }
    Ok(failures)
}
