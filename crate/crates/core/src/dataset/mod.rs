//! Synthetic private/non-private VQA corpus with forget/retain splits.
//!
//! Each individual gets a procedurally distinct high-contrast patch-pattern
//! image and `n` QA pairs, of which a fixed suffix targets private
//! attributes (health and criminal records). Questions are identity-free
//! templates, so the image is the only way to tell individuals apart.

mod io;
pub mod words;

pub use io::{load, save};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use words::{Attribute, QuestionSlot};

pub const IMAGE_SIDE: usize = 16;
pub const PATCH_SIDE: usize = 4;
pub const GRID: usize = IMAGE_SIDE / PATCH_SIDE;

/// Grayscale image, row-major u8 pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub side: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    /// Pixel values scaled to [0, 1].
    pub fn to_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }
}

/// One synthetic person: id, identity image, and attribute values.
#[derive(Debug, Clone)]
pub struct Individual {
    pub id: u32,
    pub pattern: u16,
    pub image: Image,
    pub name: String,
    pub birthdate: String,
    pub occupation: String,
    pub phone: String,
    pub health: String,
    pub criminal: String,
}

/// One VQA sample. Field names match the manifest schema exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VQARecord {
    pub id: u32,
    pub j: u32,
    pub question: String,
    pub answer: String,
    pub is_private: bool,
    pub q_paraphrases: Vec<String>,
    pub a_paraphrase: String,
    pub a_perturbed: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<VQARecord>,
    pub images: BTreeMap<u32, Image>,
    pub vocab: Vec<String>,
}

impl Dataset {
    pub fn individual_ids(&self) -> Vec<u32> {
        self.images.keys().copied().collect()
    }

    pub fn image(&self, id: u32) -> Result<&Image> {
        self.images.get(&id).ok_or(CoreError::MissingImage { id })
    }

    /// Merge another corpus (disjoint ids) into this one.
    pub fn extend(&mut self, other: Dataset) -> Result<()> {
        for (id, img) in other.images {
            if self.images.insert(id, img).is_some() {
                return Err(CoreError::config(format!(
                    "extend: duplicate individual id {id}"
                )));
            }
        }
        self.records.extend(other.records);
        Ok(())
    }
}

/// Deterministic id -> 16-bit patch pattern. Affine map with an odd
/// multiplier is bijective mod 2^16, so patterns are pairwise distinct for
/// any id range below 60000 (the zero preimage sits at id 65534).
fn pattern_for(id: u32) -> u16 {
    (40503u32.wrapping_mul(id + 2) & 0xFFFF) as u16
}

/// Filled cells sit in [139, 255], empty cells in [0, 116]: high contrast
/// for the patch-presence questions (threshold 128), with a per-(id, cell)
/// shade code so identity survives order-insensitive feature pooling
/// downstream.
fn image_for(pattern: u16, id: u32) -> Image {
    let mut pixels = vec![0u8; IMAGE_SIDE * IMAGE_SIDE];
    for cell in 0..GRID * GRID {
        let filled = pattern >> cell & 1 == 1;
        let shade = ((id as u64 + 1)
            .wrapping_mul(cell as u64 + 3)
            .wrapping_mul(2_654_435_761)
            >> 7) as usize
            % 30;
        let level = if filled {
            255 - 4 * shade as u8
        } else {
            4 * shade as u8
        };
        let (cr, cc) = (cell / GRID, cell % GRID);
        for dr in 0..PATCH_SIDE {
            for dc in 0..PATCH_SIDE {
                pixels[(cr * PATCH_SIDE + dr) * IMAGE_SIDE + cc * PATCH_SIDE + dc] = level;
            }
        }
    }
    Image {
        side: IMAGE_SIDE,
        pixels,
    }
}

fn make_individual(id: u32, seed: u64) -> Individual {
    let mut rng = Rng::new(seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let pattern = pattern_for(id);
    let name = format!(
        "{} {}",
        words::FIRST_NAMES[rng.below(words::FIRST_NAMES.len())],
        words::LAST_NAMES[rng.below(words::LAST_NAMES.len())]
    );
    let birthdate = format!(
        "{} {} {}",
        words::MONTHS[rng.below(12)],
        words::day_tokens()[rng.below(28)],
        words::year_tokens()[rng.below(50)]
    );
    let occupation = words::OCCUPATIONS[rng.below(24)].to_string();
    let phone = format!(
        "{} {}",
        words::PHONE_PREFIXES[rng.below(12)],
        words::phone_suffixes()[rng.below(40)]
    );
    let health = words::HEALTH_CONDITIONS[rng.below(16)].to_string();
    let criminal = words::CRIMINAL_RECORDS[rng.below(12)].to_string();
    Individual {
        id,
        pattern,
        image: image_for(pattern, id),
        name,
        birthdate,
        occupation,
        phone,
        health,
        criminal,
    }
}

fn answer_for(ind: &Individual, attr: Attribute) -> String {
    match attr {
        Attribute::Name => ind.name.clone(),
        Attribute::Birthdate => ind.birthdate.clone(),
        Attribute::Occupation => ind.occupation.clone(),
        Attribute::Phone => ind.phone.clone(),
        Attribute::Health => ind.health.clone(),
        Attribute::Criminal => ind.criminal.clone(),
        Attribute::Perception(r, c) => {
            let cell = r * GRID + c;
            if ind.pattern >> cell & 1 == 1 {
                "yes".to_string()
            } else {
                "no".to_string()
            }
        }
    }
}

/// Three wrong answers from the same attribute pool, each different from the
/// true answer, formatted like the answer paraphrase.
fn perturbed_for(ind: &Individual, attr: Attribute, rng: &mut Rng) -> Vec<String> {
    let truth = answer_for(ind, attr);
    if let Attribute::Perception(_, _) = attr {
        // the wrong-pool minus the true answer is exactly three entries
        return words::YES_NO_POOL
            .iter()
            .filter(|&&w| w != truth)
            .map(|w| words::paraphrase_answer(w))
            .collect();
    }
    let draw = |rng: &mut Rng| -> String {
        match attr {
            Attribute::Name => format!(
                "{} {}",
                words::FIRST_NAMES[rng.below(24)],
                words::LAST_NAMES[rng.below(24)]
            ),
            Attribute::Birthdate => format!(
                "{} {} {}",
                words::MONTHS[rng.below(12)],
                words::day_tokens()[rng.below(28)],
                words::year_tokens()[rng.below(50)]
            ),
            Attribute::Occupation => words::OCCUPATIONS[rng.below(24)].to_string(),
            Attribute::Phone => format!(
                "{} {}",
                words::PHONE_PREFIXES[rng.below(12)],
                words::phone_suffixes()[rng.below(40)]
            ),
            Attribute::Health => words::HEALTH_CONDITIONS[rng.below(16)].to_string(),
            Attribute::Criminal => words::CRIMINAL_RECORDS[rng.below(12)].to_string(),
            Attribute::Perception(_, _) => unreachable!(),
        }
    };
    let mut out = Vec::with_capacity(3);
    while out.len() < 3 {
        let cand = draw(rng);
        if cand != truth && !out.contains(&words::paraphrase_answer(&cand)) {
            out.push(words::paraphrase_answer(&cand));
        }
    }
    out
}

fn records_for(
    ind: &Individual,
    slots: &[QuestionSlot],
    n_nonprivate: usize,
    seed: u64,
) -> Vec<VQARecord> {
    let mut rng = Rng::new(seed ^ (ind.id as u64).wrapping_mul(0xD134_2543_DE82_EF95));
    let mut records = Vec::with_capacity(slots.len());
    for (j, slot) in slots.iter().enumerate() {
        let form_idx = rng.below(3);
        let question = slot.forms[form_idx].clone();
        let q_paraphrases: Vec<String> = (0..3)
            .filter(|&f| f != form_idx)
            .map(|f| slot.forms[f].clone())
            .collect();
        let answer = answer_for(ind, slot.attribute);
        let a_paraphrase = words::paraphrase_answer(&answer);
        let a_perturbed = perturbed_for(ind, slot.attribute, &mut rng);
        records.push(VQARecord {
            id: ind.id,
            j: j as u32,
            question,
            answer,
            is_private: j >= n_nonprivate,
            q_paraphrases,
            a_paraphrase,
            a_perturbed,
        });
    }
    records
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub m: usize,
    pub n: usize,
    pub n_private: usize,
    pub seed: u64,
    /// First individual id; a held-out corpus continues where the training
    /// corpus left off so ids and images never collide.
    pub id_offset: u32,
}

/// Generate `m` individuals with `n` QA pairs each, the last `n_private` of
/// which target private attributes.
pub fn generate(m: usize, n: usize, n_private: usize, seed: u64) -> Result<Dataset> {
    generate_corpus(&GenConfig {
        m,
        n,
        n_private,
        seed,
        id_offset: 0,
    })
}

pub fn generate_corpus(cfg: &GenConfig) -> Result<Dataset> {
    let nonpriv = words::nonprivate_slots();
    let priv_slots = words::private_slots();
    if cfg.m < 2 {
        return Err(CoreError::config(format!("m must be >= 2, got {}", cfg.m)));
    }
    if cfg.n_private == 0 || cfg.n_private >= cfg.n {
        return Err(CoreError::config(format!(
            "need 0 < n_private < n, got n_private={} n={}",
            cfg.n_private, cfg.n
        )));
    }
    let n_nonprivate = cfg.n - cfg.n_private;
    if n_nonprivate > nonpriv.len() || cfg.n_private > priv_slots.len() {
        return Err(CoreError::config(format!(
            "question pools support at most {} non-private and {} private slots",
            nonpriv.len(),
            priv_slots.len()
        )));
    }
    if cfg.id_offset as usize + cfg.m > 60_000 {
        return Err(CoreError::config(
            "at most 60000 individuals supported (distinct-image guarantee)",
        ));
    }

    let mut slots: Vec<QuestionSlot> = nonpriv[..n_nonprivate].to_vec();
    slots.extend_from_slice(&priv_slots[..cfg.n_private]);

    let mut ds = Dataset {
        records: Vec::with_capacity(cfg.m * cfg.n),
        images: BTreeMap::new(),
        vocab: words::full_vocabulary(),
    };
    for i in 0..cfg.m {
        let id = cfg.id_offset + i as u32;
        let ind = make_individual(id, cfg.seed);
        ds.records
            .extend(records_for(&ind, &slots, n_nonprivate, cfg.seed));
        ds.images.insert(id, ind.image);
    }
    debug_assert_eq!(ds.records.len(), cfg.m * cfg.n);
    Ok(ds)
}

/// Which individuals request removal.
#[derive(Debug, Clone)]
pub enum MtildeSpec {
    Count(usize),
    Ids(Vec<u32>),
}

/// Forget/retain split: `forget`/`retain` partition the record indices,
/// `nonprivate` are the requesting individuals' non-private records (subset
/// of `retain`).
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub requested: Vec<u32>,
    pub forget: Vec<usize>,
    pub retain: Vec<usize>,
    pub nonprivate: Vec<usize>,
}

pub fn split(ds: &Dataset, m_tilde: MtildeSpec, seed: u64) -> Result<SplitSpec> {
    let ids = ds.individual_ids();
    let requested: Vec<u32> = match m_tilde {
        MtildeSpec::Count(k) => {
            if k > ids.len() {
                return Err(CoreError::config(format!(
                    "m_tilde {k} exceeds {} individuals",
                    ids.len()
                )));
            }
            let mut rng = Rng::new(seed);
            let picks = rng.choose_distinct(ids.len(), k);
            picks.into_iter().map(|i| ids[i]).collect()
        }
        MtildeSpec::Ids(list) => {
            for id in &list {
                if !ds.images.contains_key(id) {
                    return Err(CoreError::config(format!(
                        "m_tilde id {id} not in the dataset"
                    )));
                }
            }
            let mut sorted = list;
            sorted.sort_unstable();
            sorted.dedup();
            sorted
        }
    };

    let mut spec = SplitSpec {
        requested,
        forget: Vec::new(),
        retain: Vec::new(),
        nonprivate: Vec::new(),
    };
    for (idx, rec) in ds.records.iter().enumerate() {
        let is_requested = spec.requested.binary_search(&rec.id).is_ok();
        if rec.is_private && is_requested {
            spec.forget.push(idx);
        } else {
            spec.retain.push(idx);
            if is_requested {
                spec.nonprivate.push(idx);
            }
        }
    }
    Ok(spec)
}
