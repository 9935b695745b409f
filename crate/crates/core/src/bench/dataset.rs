use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::world::{PriorSpec, QuestionKind, WorldSpec};
use crate::autodiff::Tensor;
use crate::encoders::TokenSequence;
use crate::error::{Error, Result};
use crate::vqa::ImageFeatures;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    IdTest,
    OodTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::IdTest, Split::OodTest];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::IdTest => "id-test",
            Split::OodTest => "ood-test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown split '{s}' (expected train, id-test, ood-test)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectAttrs {
    pub color: usize,
    pub shape: usize,
    /// Horizontal slot, `0` is leftmost.
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub split: Split,
    pub qtype: usize,
    pub answer: usize,
    /// First token is the question-type prefix.
    pub tokens: TokenSequence,
    pub objects: Vec<ObjectAttrs>,
    pub noise_seed: u64,
    pub image: ImageFeatures,
}

impl SyntheticSample {
    /// The same sample with the two entity words of a left-of question
    /// swapped and the answer flipped. `None` for other question kinds.
    pub fn entity_swapped(&self, world: &WorldSpec) -> Option<SyntheticSample> {
        if world.question_types().get(self.qtype)?.kind != QuestionKind::LeftOf {
            return None;
        }
        let shape_range = world.shape_token(0)..world.shape_token(world.shapes.len());
        let slots: Vec<usize> = (0..self.tokens.len())
            .filter(|&i| shape_range.contains(&self.tokens.ids()[i]))
            .collect();
        if slots.len() != 2 {
            return None;
        }
        let mut ids = self.tokens.ids().to_vec();
        ids.swap(slots[0], slots[1]);
        let answer = if self.answer == world.yes_answer() {
            world.no_answer()
        } else {
            world.yes_answer()
        };
        Some(SyntheticSample {
            tokens: TokenSequence::new(ids).ok()?,
            answer,
            ..self.clone()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub id_test: usize,
    pub ood_test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 10_000,
            id_test: 2_000,
            ood_test: 2_000,
        }
    }
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::IdTest => self.id_test,
            Split::OodTest => self.ood_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<SyntheticSample>,
    pub id_test: Vec<SyntheticSample>,
    pub ood_test: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SyntheticSample] {
        match split {
            Split::Train => &self.train,
            Split::IdTest => &self.id_test,
            Split::OodTest => &self.ood_test,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &SyntheticSample> {
        self.train.iter().chain(&self.id_test).chain(&self.ood_test)
    }
}

/// Object features: one-hot color, one-hot shape, one-hot position, plus
/// `N(0, sigma^2)` noise drawn from `noise_seed`.
pub fn render_image(world: &WorldSpec, objects: &[ObjectAttrs], noise_seed: u64) -> Result<ImageFeatures> {
    let (nc, ns, m) = (world.colors.len(), world.shapes.len(), world.objects_per_image);
    let d = world.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut data = Vec::with_capacity(objects.len() * d);
    for o in objects {
        if o.color >= nc || o.shape >= ns || o.position >= m {
            return Err(Error::Data(format!("object attributes {o:?} outside the world")));
        }
        let mut row = vec![0.0; d];
        row[o.color] = 1.0;
        row[nc + o.shape] = 1.0;
        row[nc + ns + o.position] = 1.0;
        for v in &mut row {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += world.noise_sigma * z;
        }
        data.extend(row);
    }
    ImageFeatures::from_tensor(Tensor::new(vec![objects.len(), d], data)?)
}

fn sample_one(world: &WorldSpec, priors: &PriorSpec, split: Split, rng: &mut ChaCha8Rng) -> Result<SyntheticSample> {
    let types = world.question_types();
    let t = WeightedIndex::new(&world.type_weights)
        .map_err(|e| Error::Spec(format!("type weights: {e}")))?
        .sample(rng);
    let qt = &types[t];
    let k = qt.answers.len();
    let dist = match split {
        Split::OodTest => priors.ood_distribution(t, k),
        _ => priors.train_distribution(t, k),
    };
    let ai = WeightedIndex::new(&dist)
        .map_err(|e| Error::Spec(format!("answer prior: {e}")))?
        .sample(rng);
    let answer = qt.answers[ai];

    let m = world.objects_per_image;
    let mut colors: Vec<usize> = index::sample(rng, world.colors.len(), m).into_vec();
    let mut shapes: Vec<usize> = index::sample(rng, world.shapes.len(), m).into_vec();
    let mut positions: Vec<usize> = (0..m).collect();
    positions.shuffle(rng);

    let content = match qt.kind {
        QuestionKind::Color => {
            if !colors.contains(&ai) {
                colors[0] = ai;
            }
            let r = colors.iter().position(|&c| c == ai).unwrap_or(0);
            vec![world.shape_token(shapes[r])]
        }
        QuestionKind::Shape => {
            if !shapes.contains(&ai) {
                shapes[0] = ai;
            }
            let r = shapes.iter().position(|&s| s == ai).unwrap_or(0);
            vec![world.color_token(colors[r])]
        }
        QuestionKind::LeftOf => {
            let pair = index::sample(rng, m, 2);
            let (i, j) = (pair.index(0), pair.index(1));
            let (left, right) = if positions[i] < positions[j] { (i, j) } else { (j, i) };
            let (a, b) = if answer == world.yes_answer() { (left, right) } else { (right, left) };
            vec![world.shape_token(shapes[a]), world.shape_token(shapes[b])]
        }
    };
    let mut tokens = content;
    if !world.fillers.is_empty() {
        let extra = rng.random_range(0..=world.max_fillers);
        for _ in 0..extra {
            let f = if rng.random_bool(world.prefix_filler_rate) {
                world.prefix_token(rng.random_range(0..types.len()))
            } else {
                world.filler_token(rng.random_range(0..world.fillers.len()))
            };
            let at = rng.random_range(0..=tokens.len());
            tokens.insert(at, f);
        }
    }
    tokens.insert(0, qt.prefix);

    let objects: Vec<ObjectAttrs> = (0..m)
        .map(|i| ObjectAttrs {
            color: colors[i],
            shape: shapes[i],
            position: positions[i],
        })
        .collect();
    let noise_seed = rng.next_u64();
    let image = render_image(world, &objects, noise_seed)?;
    Ok(SyntheticSample {
        split,
        qtype: t,
        answer,
        tokens: TokenSequence::new(tokens)?,
        objects,
        noise_seed,
        image,
    })
}

/// Generator for sample `i` of `split`: one ChaCha stream per (split, index),
/// so any subset can be regenerated independently.
fn sample_rng(seed: u64, split: Split, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.index() << 48) | i as u64);
    rng
}

/// Sample `i` of `split`, identical to the one [`generate_dataset`] produces.
pub fn generate_sample(world: &WorldSpec, priors: &PriorSpec, split: Split, i: usize, seed: u64) -> Result<SyntheticSample> {
    sample_one(world, priors, split, &mut sample_rng(seed, split, i))
}

pub fn generate_dataset(world: &WorldSpec, priors: &PriorSpec, counts: SplitCounts, seed: u64) -> Result<Dataset> {
    world.validate()?;
    priors.validate(world)?;
    for s in Split::ALL {
        if counts.get(s) == 0 {
            return Err(Error::Config(format!("{s} count must be at least 1")));
        }
    }
    let gen = |split: Split| -> Result<Vec<SyntheticSample>> {
        (0..counts.get(split))
            .map(|i| generate_sample(world, priors, split, i, seed))
            .collect()
    };
    Ok(Dataset {
        train: gen(Split::Train)?,
        id_test: gen(Split::IdTest)?,
        ood_test: gen(Split::OodTest)?,
    })
}

fn join<T: ToString>(v: impl IntoIterator<Item = T>, sep: &str) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

/// One tab-separated line per sample:
/// `split  type  answer  tok,tok,..  color:shape:pos ..  noise_seed`.
pub fn write_dataset<W: Write>(out: &mut W, data: &Dataset) -> Result<()> {
    for s in data.iter() {
        let objs = join(s.objects.iter().map(|o| format!("{}:{}:{}", o.color, o.shape, o.position)), " ");
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            s.split,
            s.qtype,
            s.answer,
            join(s.tokens.ids(), ","),
            objs,
            s.noise_seed
        )?;
    }
    Ok(())
}

/// Inverse of [`write_dataset`]; image features are re-rendered from the
/// stored attributes and noise seed.
pub fn read_dataset<R: BufRead>(input: R, world: &WorldSpec) -> Result<Dataset> {
    let mut data = Dataset {
        train: Vec::new(),
        id_test: Vec::new(),
        ood_test: Vec::new(),
    };
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Data(format!("line {}: {what}", lineno + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 tab-separated fields"));
        }
        let split: Split = f[0].parse()?;
        let qtype: usize = f[1].parse().map_err(|_| bad("type id"))?;
        let answer: usize = f[2].parse().map_err(|_| bad("answer id"))?;
        let ids = f[3]
            .split(',')
            .map(|t| t.parse::<usize>().map_err(|_| bad("token id")))
            .collect::<Result<Vec<_>>>()?;
        let tokens = TokenSequence::checked(ids, world.vocab_size())?;
        let objects = f[4]
            .split(' ')
            .map(|o| {
                let p: Vec<usize> = o
                    .split(':')
                    .map(|x| x.parse::<usize>().map_err(|_| bad("object attribute")))
                    .collect::<Result<_>>()?;
                match p[..] {
                    [color, shape, position] => Ok(ObjectAttrs { color, shape, position }),
                    _ => Err(bad("object needs color:shape:position")),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let noise_seed: u64 = f[5].parse().map_err(|_| bad("noise seed"))?;
        if qtype >= world.question_types().len() || answer >= world.num_answers() {
            return Err(bad("type or answer outside the world"));
        }
        let image = render_image(world, &objects, noise_seed)?;
        let sample = SyntheticSample {
            split,
            qtype,
            answer,
            tokens,
            objects,
            noise_seed,
            image,
        };
        match split {
            Split::Train => data.train.push(sample),
            Split::IdTest => data.id_test.push(sample),
            Split::OodTest => data.ood_test.push(sample),
        }
    }
    Ok(data)
}
