//! The full rating model: feature embedders, fusion encoder and classifier.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, DatasetFormat, MovieMeta, RatingRecord, UserProfile};
use crate::embed::{
    age_bucket_index, encode_low, hash_bucket, occupation_index, EmbeddingStore, FeatureLayout,
    FeatureSlot, IdTable, Linear, Modality, RawFeature, StoreToken, Upsampler, EMBED_INIT, STORE_DIM,
};
use crate::fusion::{
    build_sequence, positional_encoding, predict_rating_with, DropoutCtx, Encoder, EncoderConfig,
    RatingReadout, NUM_CLASSES, SEQ_LEN,
};
use crate::init;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Floor applied to the true-class probability inside the log loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Which modality stores feed the model. Single-modal runs replace the
/// poster token with its missing-token for every movie.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ModalityMode {
    #[default]
    Single,
    Cross,
}

impl ModalityMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Single => "single",
            Self::Cross => "cross",
        }
    }

    pub fn uses(self, m: Modality) -> bool {
        self == Self::Cross || m != Modality::Poster
    }
}

impl fmt::Display for ModalityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single" => Ok(Self::Single),
            "cross" => Ok(Self::Cross),
            _ => Err(format!("unknown modality mode {s:?}")),
        }
    }
}

/// Borrowed modality stores; an absent store behaves as if every id missed.
#[derive(Clone, Copy, Debug, Default)]
pub struct Stores<'a> {
    pub title: Option<&'a EmbeddingStore>,
    pub intro: Option<&'a EmbeddingStore>,
    pub poster: Option<&'a EmbeddingStore>,
}

impl<'a> Stores<'a> {
    pub fn get(&self, m: Modality) -> Option<&'a EmbeddingStore> {
        match m {
            Modality::Title => self.title,
            Modality::Intro => self.intro,
            Modality::Poster => self.poster,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub format: DatasetFormat,
    pub encoder: EncoderConfig,
    pub id_dim: usize,
    pub hidden_dim: usize,
    pub zip_buckets: usize,
    /// Width of the vectors in the modality stores.
    pub store_dim: usize,
    pub user_capacity: usize,
    pub movie_capacity: usize,
    /// Observed (min, max) user age; only used by the 100K scalar age feature.
    pub age_range: (f64, f64),
    pub positional: bool,
    pub readout: RatingReadout,
}

impl ModelConfig {
    /// Defaults with id capacities and the age range taken from `ds`.
    pub fn for_dataset(ds: &Dataset) -> Self {
        let max_user = ds
            .users
            .iter()
            .map(|u| u.user_id)
            .chain(ds.ratings.iter().map(|r| r.user_id))
            .max()
            .unwrap_or(0);
        let max_movie = ds
            .movies
            .iter()
            .map(|m| m.movie_id)
            .chain(ds.ratings.iter().map(|r| r.movie_id))
            .max()
            .unwrap_or(0);
        let ages = ds.users.iter().map(|u| u.age as f64);
        let age_range = ages.fold((f64::MAX, f64::MIN), |(lo, hi), a| (lo.min(a), hi.max(a)));
        let age_range = if ds.users.is_empty() { (0.0, 1.0) } else { age_range };
        Self {
            format: ds.format,
            encoder: EncoderConfig::default(),
            id_dim: 64,
            hidden_dim: 256,
            zip_buckets: 1000,
            store_dim: STORE_DIM,
            user_capacity: max_user as usize + 1,
            movie_capacity: max_movie as usize + 1,
            age_range,
            positional: true,
            readout: RatingReadout::Expectation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !self.encoder.d_model.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "model width {} must be even for positional encoding",
                self.encoder.d_model
            )));
        }
        for (name, v) in [
            ("id_dim", self.id_dim),
            ("hidden_dim", self.hidden_dim),
            ("zip_buckets", self.zip_buckets),
            ("store_dim", self.store_dim),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AgeValue {
    Years(f64),
    Bucket(usize),
}

/// One interaction with every attribute resolved to an index or value.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub user_id: u32,
    pub movie_id: u32,
    pub gender: usize,
    pub age: AgeValue,
    pub occupation: usize,
    pub zip_bucket: usize,
    pub genres: Vec<usize>,
    pub rating: u8,
}

/// Joins rating records with user and movie side information.
pub struct Featurizer {
    format: DatasetFormat,
    zip_buckets: usize,
    users: HashMap<u32, UserProfile>,
    movies: HashMap<u32, MovieMeta>,
}

impl Featurizer {
    pub fn new(ds: &Dataset, zip_buckets: usize) -> Self {
        Self {
            format: ds.format,
            zip_buckets,
            users: ds.users.iter().map(|u| (u.user_id, u.clone())).collect(),
            movies: ds.movies.iter().map(|m| (m.movie_id, m.clone())).collect(),
        }
    }

    pub fn example(&self, r: &RatingRecord) -> Result<Example> {
        let u = self
            .users
            .get(&r.user_id)
            .ok_or_else(|| Error::Invalid(format!("rating references unknown user {}", r.user_id)))?;
        let m = self
            .movies
            .get(&r.movie_id)
            .ok_or_else(|| Error::Invalid(format!("rating references unknown movie {}", r.movie_id)))?;
        let age = match self.format {
            DatasetFormat::Ml100k => AgeValue::Years(u.age as f64),
            DatasetFormat::Ml1m => AgeValue::Bucket(age_bucket_index(u.age)?),
        };
        Ok(Example {
            user_id: r.user_id,
            movie_id: r.movie_id,
            gender: u.gender.index(),
            age,
            occupation: occupation_index(&u.occupation)?,
            zip_bucket: hash_bucket(&u.zip, self.zip_buckets),
            genres: m.genres.clone(),
            rating: r.rating,
        })
    }

    pub fn examples(&self, records: &[RatingRecord]) -> Result<Vec<Example>> {
        records.iter().map(|r| self.example(r)).collect()
    }
}

#[derive(Clone, Debug)]
struct Parts {
    user_table: IdTable,
    movie_table: IdTable,
    user_up: Upsampler,
    movie_up: Upsampler,
    gender_up: Upsampler,
    age_up: Upsampler,
    occupation_up: Upsampler,
    zip_up: Upsampler,
    genre_up: Upsampler,
    adapters: [Linear; 3],
    missing: [ParamId; 3],
    cls: ParamId,
    sep: ParamId,
    encoder: Encoder,
    head: Linear,
}

/// Parameters plus the wiring that maps a batch of examples to class logits.
///
/// `forward` only refers to parameters by id, so it can run on any tape whose
/// store has this model's layout (gradient checks perturb a copy).
#[derive(Clone, Debug)]
pub struct FusionModel<F> {
    pub config: ModelConfig,
    pub layout: FeatureLayout,
    pub params: ParamStore<F>,
    parts: Parts,
    positions: Tensor<F>,
}

impl<F: Real> FusionModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = FeatureLayout::new(
            config.format,
            config.user_capacity,
            config.movie_capacity,
            config.zip_buckets,
            config.age_range,
        );
        let low = |slot| layout.spec(slot).low_dim().expect("encoded slot");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, h, id) = (config.encoder.d_model, config.hidden_dim, config.id_dim);
        let p = &mut params;
        let r = &mut rng;

        let user_table = IdTable::new(p, "user_id", config.user_capacity, id, r);
        let user_up = Upsampler::new(p, "user_id", id, h, d, r);
        let gender_up = Upsampler::new(p, "gender", low(FeatureSlot::Gender), h, d, r);
        let age_up = Upsampler::new(p, "age", low(FeatureSlot::Age), h, d, r);
        let occupation_up = Upsampler::new(p, "occupation", low(FeatureSlot::Occupation), h, d, r);
        let zip_up = Upsampler::new(p, "zip", low(FeatureSlot::Zip), h, d, r);
        let movie_table = IdTable::new(p, "movie_id", config.movie_capacity, id, r);
        let movie_up = Upsampler::new(p, "movie_id", id, h, d, r);
        let genre_up = Upsampler::new(p, "genres", low(FeatureSlot::Genres), h, d, r);
        let adapters = Modality::ALL.map(|m| {
            let w = init::uniform(config.store_dim, d, EMBED_INIT, r);
            Linear::new(p, &format!("{}.adapter", m.name()), w, true)
        });
        let missing = Modality::ALL.map(|m| {
            p.add(
                format!("{}.missing", m.name()),
                init::uniform(1, config.store_dim, EMBED_INIT, r),
            )
        });
        let cls = p.add("cls", init::uniform(1, d, EMBED_INIT, r));
        let sep = p.add("sep", init::uniform(1, d, EMBED_INIT, r));
        let encoder = Encoder::new(p, "encoder", config.encoder.clone(), r)?;
        let head = Linear::new(p, "head", init::xavier(d, NUM_CLASSES, r), true);

        let positions = if config.positional {
            positional_encoding(SEQ_LEN, d)?.cast()
        } else {
            Tensor::zeros(SEQ_LEN, d)
        };
        Ok(Self {
            config,
            layout,
            params,
            parts: Parts {
                user_table,
                movie_table,
                user_up,
                movie_up,
                gender_up,
                age_up,
                occupation_up,
                zip_up,
                genre_up,
                adapters,
                missing,
                cls,
                sep,
                encoder,
                head,
            },
            positions,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.parts.encoder
    }

    pub fn missing_token(&self, m: Modality) -> ParamId {
        self.parts.missing[m.tag() as usize]
    }

    fn low_batch(&self, slot: FeatureSlot, batch: &[&Example]) -> Result<Tensor<F>> {
        let spec = self.layout.spec(slot);
        let width = spec.low_dim().expect("encoded slot");
        let mut t = Tensor::zeros(batch.len(), width);
        for (i, ex) in batch.iter().enumerate() {
            let raw = match slot {
                FeatureSlot::Gender => RawFeature::Category(ex.gender),
                FeatureSlot::Age => match ex.age {
                    AgeValue::Years(y) => RawFeature::Scalar(y),
                    AgeValue::Bucket(b) => RawFeature::Category(b),
                },
                FeatureSlot::Occupation => RawFeature::Category(ex.occupation),
                FeatureSlot::Zip => {
                    if ex.zip_bucket >= width {
                        return Err(Error::Invalid(format!(
                            "zip bucket {} outside 0..{width}",
                            ex.zip_bucket
                        )));
                    }
                    t.set(i, ex.zip_bucket, F::one());
                    continue;
                }
                FeatureSlot::Genres => RawFeature::Categories(&ex.genres),
                _ => unreachable!("slot {slot:?} has no low encoding"),
            };
            for (dst, v) in t.row_mut(i).iter_mut().zip(encode_low(spec, raw)?) {
                *dst = F::of(v);
            }
        }
        Ok(t)
    }

    fn store_token(
        &self,
        tape: &mut Tape<'_, F>,
        m: Modality,
        batch: &[&Example],
        stores: &Stores<'_>,
        mode: ModalityMode,
    ) -> Result<Var> {
        let idx = m.tag() as usize;
        let fill = tape.param(self.parts.missing[idx]);
        let store = if mode.uses(m) { stores.get(m) } else { None };
        let x = match store {
            None => tape.repeat_rows(fill, batch.len())?,
            Some(store) => {
                if store.dim() != self.config.store_dim {
                    return Err(Error::Invalid(format!(
                        "{m} store has width {}, model expects {}",
                        store.dim(),
                        self.config.store_dim
                    )));
                }
                let mut base = Tensor::zeros(batch.len(), self.config.store_dim);
                let mut misses = Vec::new();
                for (i, ex) in batch.iter().enumerate() {
                    match store.lookup(ex.movie_id) {
                        StoreToken::Stored(v) => {
                            for (dst, &s) in base.row_mut(i).iter_mut().zip(v) {
                                *dst = F::of(s as f64);
                            }
                        }
                        StoreToken::Missing => misses.push(i),
                    }
                }
                let base = tape.constant(base);
                if misses.is_empty() {
                    base
                } else {
                    tape.overlay_rows(base, fill, &misses)?
                }
            }
        };
        self.parts.adapters[idx].forward(tape, x)
    }

    /// The ten feature tokens of a batch, each `b x d`, in slot order.
    pub fn feature_tokens(
        &self,
        tape: &mut Tape<'_, F>,
        batch: &[&Example],
        stores: &Stores<'_>,
        mode: ModalityMode,
    ) -> Result<Vec<Var>> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let p = &self.parts;
        let users: Vec<usize> = batch.iter().map(|e| e.user_id as usize).collect();
        let movies: Vec<usize> = batch.iter().map(|e| e.movie_id as usize).collect();
        let mut tokens = Vec::with_capacity(10);

        let u = p.user_table.embed(tape, &users)?;
        tokens.push(p.user_up.forward(tape, u)?);
        for (slot, up) in [
            (FeatureSlot::Gender, &p.gender_up),
            (FeatureSlot::Age, &p.age_up),
            (FeatureSlot::Occupation, &p.occupation_up),
            (FeatureSlot::Zip, &p.zip_up),
        ] {
            let x = tape.constant(self.low_batch(slot, batch)?);
            tokens.push(up.forward(tape, x)?);
        }
        let m = p.movie_table.embed(tape, &movies)?;
        tokens.push(p.movie_up.forward(tape, m)?);
        let g = tape.constant(self.low_batch(FeatureSlot::Genres, batch)?);
        tokens.push(p.genre_up.forward(tape, g)?);
        for m in Modality::ALL {
            tokens.push(self.store_token(tape, m, batch, stores, mode)?);
        }
        Ok(tokens)
    }

    /// Class logits, `b x 5`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_, F>,
        batch: &[&Example],
        stores: &Stores<'_>,
        mode: ModalityMode,
        drop: Option<&mut DropoutCtx<'_>>,
    ) -> Result<Var> {
        let tokens = self.feature_tokens(tape, batch, stores, mode)?;
        let cls = tape.param(self.parts.cls);
        let sep = tape.param(self.parts.sep);
        let positions = self.config.positional.then_some(&self.positions);
        let seq = build_sequence(tape, &tokens, cls, sep, positions)?;
        let h = self.parts.encoder.forward_cls(tape, seq, SEQ_LEN, drop)?;
        self.parts.head.forward(tape, h)
    }

    /// Mean cross-entropy of a batch given its logits.
    pub fn loss(&self, tape: &mut Tape<'_, F>, logits: Var, batch: &[&Example]) -> Result<Var> {
        let targets = batch
            .iter()
            .map(|e| rating_class(e.rating))
            .collect::<Result<Vec<_>>>()?;
        let probs = tape.softmax_rows(logits)?;
        Ok(tape.nll(probs, &targets, F::of(PROB_FLOOR))?)
    }

    /// Class probabilities for each example, without dropout.
    pub fn probabilities(
        &self,
        batch: &[&Example],
        stores: &Stores<'_>,
        mode: ModalityMode,
    ) -> Result<Vec<[f64; NUM_CLASSES]>> {
        let mut tape = Tape::with_params(&self.params);
        let logits = self.forward(&mut tape, batch, stores, mode, None)?;
        let probs = tape.softmax_rows(logits)?;
        let t = tape.value(probs);
        Ok((0..t.rows())
            .map(|r| std::array::from_fn(|c| t.get(r, c).as_f64()))
            .collect())
    }

    /// Real-valued rating predictions under the configured readout.
    pub fn predict(
        &self,
        batch: &[&Example],
        stores: &Stores<'_>,
        mode: ModalityMode,
    ) -> Result<Vec<f64>> {
        self.probabilities(batch, stores, mode)?
            .iter()
            .map(|p| predict_rating_with(p, self.config.readout))
            .collect()
    }
}

/// Class index (0-based) of a 1..=5 rating.
pub fn rating_class(rating: u8) -> Result<usize> {
    if (1..=5).contains(&rating) {
        Ok(rating as usize - 1)
    } else {
        Err(Error::Invalid(format!("rating {rating} outside 1..=5")))
    }
}
