//! Synthetic word images rendered from built-in 8×6 glyph bitmaps.
//!
//! Dataset directories hold `images/<id>.pgm` (binary P5, 8-bit) and
//! `labels.tsv` with one `<id>\t<word>` line per image.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::alphabet::Alphabet;
use crate::error::{Error, Result};
use crate::image::{quantize, GrayImage};

pub const GLYPH_ROWS: usize = 8;
pub const GLYPH_COLS: usize = 6;
pub const MAX_WORD_LEN: usize = 20;

/// Built-in list of 2000 lowercase words, 3 to 10 characters each.
pub const BUILTIN_WORDS: &str = include_str!("../data/words.txt");

#[rustfmt::skip]
const GLYPHS: [[&str; GLYPH_ROWS]; 36] = [
    // a
    ["......", "......", ".###..", "....#.", ".####.", "#...#.", ".####.", "......"],
    // b
    ["#.....", "#.....", "####..", "#...#.", "#...#.", "#...#.", "####..", "......"],
    // c
    ["......", "......", ".###..", "#.....", "#.....", "#.....", ".###..", "......"],
    // d
    ["....#.", "....#.", ".####.", "#...#.", "#...#.", "#...#.", ".####.", "......"],
    // e
    ["......", "......", ".###..", "#...#.", "#####.", "#.....", ".###..", "......"],
    // f
    ["..##..", ".#....", "###...", ".#....", ".#....", ".#....", ".#....", "......"],
    // g
    ["......", "......", ".####.", "#...#.", "#...#.", ".####.", "....#.", ".###.."],
    // h
    ["#.....", "#.....", "####..", "#...#.", "#...#.", "#...#.", "#...#.", "......"],
    // i
    ["..#...", "......", ".##...", "..#...", "..#...", "..#...", ".###..", "......"],
    // j
    ["...#..", "......", "..##..", "...#..", "...#..", "...#..", "#..#..", ".##..."],
    // k
    ["#.....", "#.....", "#..#..", "#.#...", "##....", "#.#...", "#..#..", "......"],
    // l
    [".##...", "..#...", "..#...", "..#...", "..#...", "..#...", ".###..", "......"],
    // m
    ["......", "......", "##.#..", "#.#.#.", "#.#.#.", "#.#.#.", "#.#.#.", "......"],
    // n
    ["......", "......", "####..", "#...#.", "#...#.", "#...#.", "#...#.", "......"],
    // o
    ["......", "......", ".###..", "#...#.", "#...#.", "#...#.", ".###..", "......"],
    // p
    ["......", "......", "####..", "#...#.", "#...#.", "####..", "#.....", "#....."],
    // q
    ["......", "......", ".####.", "#...#.", "#...#.", ".####.", "....#.", "....#."],
    // r
    ["......", "......", "#.##..", "##....", "#.....", "#.....", "#.....", "......"],
    // s
    ["......", "......", ".####.", "#.....", ".###..", "....#.", "####..", "......"],
    // t
    [".#....", ".#....", "####..", ".#....", ".#....", ".#....", "..##..", "......"],
    // u
    ["......", "......", "#...#.", "#...#.", "#...#.", "#...#.", ".####.", "......"],
    // v
    ["......", "......", "#...#.", "#...#.", "#...#.", ".#.#..", "..#...", "......"],
    // w
    ["......", "......", "#...#.", "#...#.", "#.#.#.", "#.#.#.", ".#.#..", "......"],
    // x
    ["......", "......", "#...#.", ".#.#..", "..#...", ".#.#..", "#...#.", "......"],
    // y
    ["......", "......", "#...#.", "#...#.", "#...#.", ".####.", "....#.", ".###.."],
    // z
    ["......", "......", "#####.", "...#..", "..#...", ".#....", "#####.", "......"],
    // 0
    [".###..", "#...#.", "#..##.", "#.#.#.", "##..#.", "#...#.", ".###..", "......"],
    // 1
    ["..#...", ".##...", "#.#...", "..#...", "..#...", "..#...", "#####.", "......"],
    // 2
    [".###..", "#...#.", "....#.", "...#..", "..#...", ".#....", "#####.", "......"],
    // 3
    ["####..", "....#.", "....#.", ".###..", "....#.", "....#.", "####..", "......"],
    // 4
    ["...#..", "..##..", ".#.#..", "#..#..", "#####.", "...#..", "...#..", "......"],
    // 5
    ["#####.", "#.....", "####..", "....#.", "....#.", "#...#.", ".###..", "......"],
    // 6
    ["..##..", ".#....", "#.....", "####..", "#...#.", "#...#.", ".###..", "......"],
    // 7
    ["#####.", "....#.", "...#..", "..#...", ".#....", ".#....", ".#....", "......"],
    // 8
    [".###..", "#...#.", "#...#.", ".###..", "#...#.", "#...#.", ".###..", "......"],
    // 9
    [".###..", "#...#.", "#...#.", ".####.", "....#.", "...#..", ".##...", "......"],
];

/// The built-in binary glyph for every non-END symbol.
#[derive(Clone, Copy, Debug, Default)]
pub struct GlyphSet;

impl GlyphSet {
    /// Whether glyph `symbol` has its pixel at (`row`, `col`) set.
    pub fn pixel(&self, symbol: usize, row: usize, col: usize) -> bool {
        GLYPHS[symbol][row].as_bytes()[col] == b'#'
    }

    pub fn len(&self) -> usize {
        GLYPHS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    /// output image height
    pub height: usize,
    /// each glyph pixel becomes a `scale`×`scale` block
    pub scale: usize,
    /// blank columns between glyph cells, in glyph pixels (multiplied by `scale`)
    pub spacing: usize,
    /// left/right margin in pixels
    pub margin: usize,
    /// images narrower than this are padded on the right
    pub min_width: usize,
    /// maximum per-glyph offset in pixels, applied independently on both axes
    pub jitter: i64,
    /// standard deviation of additive Gaussian noise (intensity units)
    pub noise_sigma: f64,
    pub background: (f64, f64),
    pub foreground: (f64, f64),
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            height: 32,
            scale: 2,
            spacing: 1,
            margin: 4,
            min_width: 32,
            jitter: 1,
            noise_sigma: 0.05,
            background: (0.0, 0.35),
            foreground: (0.65, 1.0),
            seed: 0,
        }
    }
}

impl RenderConfig {
    pub fn pitch(&self) -> usize {
        (GLYPH_COLS + self.spacing) * self.scale
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || GLYPH_ROWS * self.scale > self.height {
            return Err(Error::input(format!(
                "scale {} does not fit glyphs into height {}",
                self.scale, self.height
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::input("noise sigma must be non-negative"));
        }
        let ok = |r: (f64, f64)| r.0 <= r.1 && r.0 >= 0.0 && r.1 <= 1.0;
        if !ok(self.background) || !ok(self.foreground) {
            return Err(Error::input("intensity ranges must be ordered sub-ranges of [0, 1]"));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        RenderConfig { seed, ..self.clone() }
    }
}

/// Renders `word` into a grayscale image. Pixel values are quantized to
/// multiples of 1/255 so that images survive the PGM format unchanged.
pub fn render_word(word: &str, config: &RenderConfig) -> Result<GrayImage> {
    config.validate()?;
    if word.len() > MAX_WORD_LEN {
        return Err(Error::input(format!("{word:?} is longer than {MAX_WORD_LEN} characters")));
    }
    let symbols = Alphabet.encode(word)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bg = sample_range(&mut rng, config.background);
    let fg = sample_range(&mut rng, config.foreground);

    let s = config.scale;
    let width = (2 * config.margin + symbols.len() * config.pitch()).max(config.min_width);
    let mut img = GrayImage::filled(config.height, width, bg);
    let top = (config.height - GLYPH_ROWS * s) as i64 / 2;
    for (i, &sym) in symbols.iter().enumerate() {
        let dx = rng.gen_range(-config.jitter..=config.jitter);
        let dy = rng.gen_range(-config.jitter..=config.jitter);
        let left = (config.margin + i * config.pitch()) as i64 + dx;
        for gr in 0..GLYPH_ROWS {
            for gc in 0..GLYPH_COLS {
                if !GlyphSet.pixel(sym, gr, gc) {
                    continue;
                }
                for yy in 0..s {
                    for xx in 0..s {
                        let r = top + dy + (gr * s + yy) as i64;
                        let c = left + (gc * s + xx) as i64;
                        if r >= 0 && (r as usize) < config.height && c >= 0 && (c as usize) < width {
                            img.set(r as usize, c as usize, fg);
                        }
                    }
                }
            }
        }
    }
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::input(e.to_string()))?;
        for v in img.pixels_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in img.pixels_mut() {
        *v = quantize(*v) as f64 / 255.0;
    }
    Ok(img)
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// A labeled image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub word: String,
    pub image: GrayImage,
}

/// Seed for render `index` of word number `word_index`.
pub fn render_seed(base: u64, word_index: usize, index: usize) -> u64 {
    let mut z = base
        .wrapping_add((word_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders each word with render indices `first..first + count`, then
/// shuffles the result with the config seed.
pub fn render_range(corpus: &[String], first: usize, count: usize, config: &RenderConfig) -> Result<Vec<Sample>> {
    if corpus.is_empty() {
        return Err(Error::input("corpus is empty"));
    }
    let mut out = Vec::with_capacity(corpus.len() * count);
    for (wi, word) in corpus.iter().enumerate() {
        for j in first..first + count {
            let cfg = config.with_seed(render_seed(config.seed, wi, j));
            out.push(Sample {
                id: format!("w{wi:05}r{j:02}"),
                word: word.clone(),
                image: render_word(word, &cfg)?,
            });
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ (first as u64) << 32));
    Ok(out)
}

pub fn generate_dataset(corpus: &[String], samples_per_word: usize, config: &RenderConfig) -> Result<Vec<Sample>> {
    render_range(corpus, 0, samples_per_word, config)
}

/// In-vocabulary split: the same words, disjoint render seeds.
pub fn split_by_render(
    corpus: &[String],
    train_per_word: usize,
    test_per_word: usize,
    config: &RenderConfig,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    Ok((
        render_range(corpus, 0, train_per_word, config)?,
        render_range(corpus, train_per_word, test_per_word, config)?,
    ))
}

/// Out-of-vocabulary split of a word list: `(train_words, held_out_words)`.
pub fn split_words(corpus: &[String], held_out_fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut unique: Vec<String> = corpus.to_vec();
    unique.sort();
    unique.dedup();
    unique.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ((unique.len() as f64) * held_out_fraction).round() as usize;
    let held = unique.split_off(unique.len() - n.min(unique.len()));
    (unique, held)
}

pub fn builtin_words() -> Vec<String> {
    parse_word_list(BUILTIN_WORDS).expect("built-in word list is valid")
}

/// Reads a word list (one word per line); blank lines are skipped.
pub fn load_word_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_word_list(&text)
}

pub fn parse_word_list(text: &str) -> Result<Vec<String>> {
    let mut words = Vec::new();
    for line in text.lines() {
        let w = line.trim();
        if w.is_empty() {
            continue;
        }
        Alphabet.encode(w)?;
        words.push(w.to_string());
    }
    Ok(words)
}

/// `n` distinct words chosen with a seeded shuffle (all of them if fewer).
pub fn sample_words(words: &[String], n: usize, seed: u64) -> Vec<String> {
    let mut unique: Vec<String> = words.to_vec();
    unique.sort();
    unique.dedup();
    unique.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    unique.truncate(n);
    unique
}

pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut labels = String::new();
    for s in samples {
        if s.id.contains(['\t', '\n', '/']) {
            return Err(Error::input(format!("sample id {:?} is not a plain name", s.id)));
        }
        s.image.save_pgm(&images.join(format!("{}.pgm", s.id)))?;
        labels.push_str(&format!("{}\t{}\n", s.id, s.word));
    }
    let path = dir.join("labels.tsv");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(labels.as_bytes()).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join("labels.tsv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, word) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(format!("labels.tsv line {}: expected <id>\\t<word>", n + 1)))?;
        let image = GrayImage::load_pgm(&dir.join("images").join(format!("{id}.pgm")))?;
        out.push(Sample {
            id: id.to_string(),
            word: word.to_string(),
            image,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn words(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn glyphs_are_complete_and_distinct() {
        let mut seen = HashSet::new();
        for g in GLYPHS.iter() {
            assert!(g.iter().all(|r| r.len() == GLYPH_COLS));
            assert!(g.iter().any(|r| r.contains('#')));
            assert!(seen.insert(g.join("")));
        }
        assert_eq!(seen.len(), Alphabet.len() - 1);
    }

    #[test]
    fn noiseless_render_uses_two_intensities() {
        let cfg = RenderConfig { noise_sigma: 0.0, jitter: 0, seed: 5, ..Default::default() };
        let img = render_word("hello42", &cfg).unwrap();
        let distinct: HashSet<u64> = img.pixels().iter().map(|v| v.to_bits()).collect();
        assert_eq!(distinct.len(), 2);
        assert_eq!(img.height(), 32);
        assert_eq!(img.width(), 2 * cfg.margin + 7 * cfg.pitch());
    }

    #[test]
    fn render_is_deterministic_and_bounded() {
        let cfg = RenderConfig { noise_sigma: 0.3, seed: 99, ..Default::default() };
        let a = render_word("abc", &cfg).unwrap();
        assert_eq!(a, render_word("abc", &cfg).unwrap());
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, render_word("abc", &cfg.with_seed(100)).unwrap());
    }

    #[test]
    fn swapped_words_swap_column_blocks() {
        let cfg = RenderConfig { noise_sigma: 0.0, jitter: 0, seed: 3, min_width: 0, ..Default::default() };
        let ab = render_word("ab", &cfg).unwrap();
        let ba = render_word("ba", &cfg).unwrap();
        let (m, p) = (cfg.margin, cfg.pitch());
        let block = |c: usize| -> usize {
            if c < m || c >= m + 2 * p {
                c
            } else if c < m + p {
                c + p
            } else {
                c - p
            }
        };
        for r in 0..ab.height() {
            for c in 0..ab.width() {
                assert_eq!(ab.get(r, c), ba.get(r, block(c)));
            }
        }
        assert_ne!(ab, ba);
    }

    #[test]
    fn render_rejects_bad_words() {
        let cfg = RenderConfig::default();
        assert!(matches!(render_word("Hi", &cfg), Err(Error::Input(_))));
        assert!(render_word(&"a".repeat(21), &cfg).is_err());
        assert!(render_word("", &cfg).unwrap().width() >= cfg.min_width);
    }

    #[test]
    fn dataset_counts_and_splits() {
        let corpus = words(&["cat", "dog", "sun", "map", "red", "tin", "box", "jam", "owl", "ink"]);
        let cfg = RenderConfig::default();
        assert_eq!(generate_dataset(&corpus, 3, &cfg).unwrap().len(), 30);

        let (train, test) = split_by_render(&corpus, 2, 1, &cfg).unwrap();
        let train_imgs: HashSet<Vec<u64>> =
            train.iter().map(|s| s.image.pixels().iter().map(|v| v.to_bits()).collect()).collect();
        assert!(test.iter().all(|s| !train_imgs.contains(&s.image.pixels().iter().map(|v| v.to_bits()).collect::<Vec<_>>())));
        let ids: HashSet<&str> = train.iter().chain(&test).map(|s| s.id.as_str()).collect();
        assert_eq!(ids.len(), 30);

        let (a, b) = split_words(&corpus, 0.3, 1);
        assert_eq!(b.len(), 3);
        assert!(a.iter().all(|w| !b.contains(w)));
        assert!(generate_dataset(&[], 3, &cfg).is_err());
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = words(&["alpha", "b2", "zz"]);
        let data = generate_dataset(&corpus, 2, &RenderConfig::default()).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let labels = fs::read_to_string(dir.path().join("labels.tsv")).unwrap();
        assert_eq!(labels.lines().count(), 6);
        assert!(!labels.contains('\r'));
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn word_list_parsing() {
        let builtin = builtin_words();
        assert_eq!(builtin.len(), 2000);
        assert!(builtin.iter().all(|w| (3..=10).contains(&w.len())));
        assert_eq!(parse_word_list("one\n\ntwo\n").unwrap(), words(&["one", "two"]));
        assert!(parse_word_list("ok\nNo\n").is_err());
        let picked = sample_words(&words(&["a", "b", "c", "a"]), 2, 4);
        assert_eq!(picked.len(), 2);
        assert_eq!(picked, sample_words(&words(&["a", "b", "c"]), 2, 4));
    }
}
