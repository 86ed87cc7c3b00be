//! Token fusion of two views.
//!
//! Three deterministic strategies combine the local representations of two
//! views into one token set for the global encoder. Random token fusion is
//! the training-only branch: every spatial position takes its token from
//! view 1 or view 2 according to a Bernoulli(p) mask with `p ~ U(0, 1)`,
//! and the two CLS tokens are averaged.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::vit::TokenSet;
use rand::Rng;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionStrategy {
    /// Element-wise mean of all tokens; `N + 1` tokens.
    Average,
    /// The two CLS tokens only; 2 tokens.
    ClsCat,
    /// All tokens of view 1 followed by all tokens of view 2; `2(N + 1)` tokens.
    Concat,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [FusionStrategy::Average, FusionStrategy::ClsCat, FusionStrategy::Concat];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Average => "average",
            FusionStrategy::ClsCat => "cls_cat",
            FusionStrategy::Concat => "concat",
        }
    }

    /// Output token count for two views of `tokens_per_view` tokens each.
    pub fn output_tokens(self, tokens_per_view: usize) -> usize {
        match self {
            FusionStrategy::Average => tokens_per_view,
            FusionStrategy::ClsCat => 2,
            FusionStrategy::Concat => 2 * tokens_per_view,
        }
    }

    pub fn fuse<T: Scalar>(self, tape: &mut Tape<T>, z1: TokenSet, z2: TokenSet) -> Result<TokenSet> {
        match self {
            FusionStrategy::Average => fuse_average(tape, z1, z2),
            FusionStrategy::ClsCat => fuse_cls_cat(tape, z1, z2),
            FusionStrategy::Concat => fuse_concat(tape, z1, z2),
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "average" | "avg" => Ok(FusionStrategy::Average),
            "cls_cat" | "clscat" | "cls-cat" => Ok(FusionStrategy::ClsCat),
            "concat" => Ok(FusionStrategy::Concat),
            other => Err(Error::Config(format!("unknown fusion strategy '{other}'"))),
        }
    }
}

fn check_pair<T: Scalar>(tape: &Tape<T>, z1: TokenSet, z2: TokenSet, same_count: bool) -> Result<()> {
    let (s1, s2) = (tape.shape(z1.tokens), tape.shape(z2.tokens));
    let ok = s1[0] == s2[0] && s1[2] == s2[2] && (!same_count || s1[1] == s2[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::dim(format!("cannot fuse token sets {s1:?} and {s2:?}")))
    }
}

/// `(z1 + z2) / 2`.
pub fn fuse_average<T: Scalar>(tape: &mut Tape<T>, z1: TokenSet, z2: TokenSet) -> Result<TokenSet> {
    check_pair(tape, z1, z2, true)?;
    let sum = tape.add(z1.tokens, z2.tokens)?;
    let mean = tape.mul_scalar(sum, T::of(0.5))?;
    TokenSet::new(tape, mean)
}

/// `{z1_cls, z2_cls}`; spatial tokens are discarded.
pub fn fuse_cls_cat<T: Scalar>(tape: &mut Tape<T>, z1: TokenSet, z2: TokenSet) -> Result<TokenSet> {
    check_pair(tape, z1, z2, false)?;
    let c1 = tape.slice_tokens(z1.tokens, 0..1)?;
    let c2 = tape.slice_tokens(z2.tokens, 0..1)?;
    let out = tape.concat_along(&[c1, c2], 1)?;
    TokenSet::new(tape, out)
}

/// `{z1_cls, z1_spatial.., z2_cls, z2_spatial..}`; token counts may differ.
pub fn fuse_concat<T: Scalar>(tape: &mut Tape<T>, z1: TokenSet, z2: TokenSet) -> Result<TokenSet> {
    check_pair(tape, z1, z2, false)?;
    let out = tape.concat_along(&[z1.tokens, z2.tokens], 1)?;
    TokenSet::new(tape, out)
}

/// Per-spatial-token view choice: `bits[i]` selects view 1 for spatial token `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RtfMask {
    bits: Vec<bool>,
    p: f64,
}

impl RtfMask {
    /// Draws `n` independent Bernoulli(`p`) bits.
    pub fn with_probability<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::Contract("a mask needs at least one spatial token".into()));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Contract(format!("selection probability {p} outside [0, 1]")));
        }
        let bits = (0..n).map(|_| rng.random::<f64>() < p).collect();
        Ok(Self { bits, p })
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        let p = bits.iter().filter(|&&b| b).count() as f64 / bits.len().max(1) as f64;
        Self { bits, p }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Probability the bits were drawn with (empirical for [`RtfMask::from_bits`]).
    pub fn probability(&self) -> f64 {
        self.p
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn complement(&self) -> Self {
        Self { bits: self.bits.iter().map(|b| !b).collect(), p: 1.0 - self.p }
    }

    /// `'1'`/`'0'` per spatial token; the first character is spatial token 1.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn parse_bit_string(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::Format(format!("bad mask character '{other}'"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if bits.is_empty() {
            return Err(Error::Format("empty mask".into()));
        }
        Ok(Self::from_bits(bits))
    }
}

/// Draws `p ~ U(0, 1)` once, then `n` Bernoulli(`p`) bits.
pub fn sample_rtf_mask<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<RtfMask> {
    if n == 0 {
        return Err(Error::Contract("a mask needs at least one spatial token".into()));
    }
    let p = rng.random::<f64>();
    RtfMask::with_probability(n, p, rng)
}

/// Random token fusion of two `[B, N + 1, D]` token sets with one mask per sample.
///
/// Spatial token `i` of sample `b` is copied from view 1 when
/// `masks[b].bits()[i - 1]`, otherwise from view 2; the CLS token is the mean
/// of both CLS tokens.
pub fn rtf_fuse<T: Scalar>(tape: &mut Tape<T>, z1: TokenSet, z2: TokenSet, masks: &[RtfMask]) -> Result<TokenSet> {
    check_pair(tape, z1, z2, true)?;
    let (batch, count) = (z1.batch(tape), z1.count(tape));
    if masks.len() != batch {
        return Err(Error::dim(format!("{} masks for a batch of {batch}", masks.len())));
    }
    if count < 2 {
        return Err(Error::dim("random token fusion needs spatial tokens"));
    }
    if let Some(m) = masks.iter().find(|m| m.len() != count - 1) {
        return Err(Error::dim(format!("mask of length {} for {} spatial tokens", m.len(), count - 1)));
    }
    let c1 = tape.slice_tokens(z1.tokens, 0..1)?;
    let c2 = tape.slice_tokens(z2.tokens, 0..1)?;
    let cls = tape.add(c1, c2)?;
    let cls = tape.mul_scalar(cls, T::of(0.5))?;
    let s1 = tape.slice_tokens(z1.tokens, 1..count)?;
    let s2 = tape.slice_tokens(z2.tokens, 1..count)?;
    let take: Vec<bool> = masks.iter().flat_map(|m| m.bits().iter().copied()).collect();
    let spatial = tape.select_rows(s1, s2, &take)?;
    let out = tape.concat_along(&[cls, spatial], 1)?;
    TokenSet::new(tape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens(tape: &mut Tape<f64>, b: usize, t: usize, d: usize, seed: u64) -> TokenSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[b, t, d], |_| rng.random_range(-2.0..2.0));
        let v = tape.leaf(&x.tracked());
        TokenSet::new(tape, v).unwrap()
    }

    #[test]
    fn token_counts() {
        let mut tape = Tape::new();
        let z1 = tokens(&mut tape, 2, 17, 4, 1);
        let z2 = tokens(&mut tape, 2, 17, 4, 2);
        for s in FusionStrategy::ALL {
            let out = s.fuse(&mut tape, z1, z2).unwrap();
            assert_eq!(out.count(&tape), s.output_tokens(17));
        }
        let z3 = tokens(&mut tape, 2, 10, 4, 3);
        let cat = fuse_concat(&mut tape, z1, z3).unwrap();
        assert_eq!(cat.count(&tape), 27);
        assert!(fuse_average(&mut tape, z1, z3).is_err());
        let z4 = tokens(&mut tape, 2, 17, 5, 4);
        assert!(fuse_concat(&mut tape, z1, z4).is_err());
        assert!(fuse_cls_cat(&mut tape, z1, z4).is_err());
    }

    #[test]
    fn average_degenerate_cases() {
        let mut tape = Tape::new();
        let z = tokens(&mut tape, 1, 5, 3, 9);
        let same = fuse_average(&mut tape, z, z).unwrap();
        assert_eq!(tape.value(same.tokens), tape.value(z.tokens));
        let neg = tape.mul_scalar(z.tokens, -1.0).unwrap();
        let neg = TokenSet::new(&tape, neg).unwrap();
        let zero = fuse_average(&mut tape, z, neg).unwrap();
        assert!(tape.value(zero.tokens).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cls_cat_keeps_cls_rows_only() {
        let mut tape = Tape::new();
        let z1 = tokens(&mut tape, 1, 5, 3, 1);
        let z2 = tokens(&mut tape, 1, 5, 3, 2);
        let out = fuse_cls_cat(&mut tape, z1, z2).unwrap();
        assert_eq!(&tape.value(out.tokens)[..3], &tape.value(z1.tokens)[..3]);
        assert_eq!(&tape.value(out.tokens)[3..], &tape.value(z2.tokens)[..3]);
    }

    #[test]
    fn degenerate_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(RtfMask::with_probability(64, 1.0, &mut rng).unwrap().bits().iter().all(|&b| b));
        assert!(RtfMask::with_probability(64, 0.0, &mut rng).unwrap().bits().iter().all(|&b| !b));
        assert!(matches!(sample_rtf_mask(0, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let a = sample_rtf_mask(16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_rtf_mask(16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bit_string_roundtrip() {
        let m = RtfMask::from_bits(vec![true, false, false, true]);
        assert_eq!(m.to_bit_string(), "1001");
        assert_eq!(RtfMask::parse_bit_string("1001").unwrap().bits(), m.bits());
        assert!(RtfMask::parse_bit_string("10x1").is_err());
    }

    #[test]
    fn rtf_rejects_wrong_mask_length() {
        let mut tape = Tape::new();
        let z1 = tokens(&mut tape, 1, 5, 3, 1);
        let z2 = tokens(&mut tape, 1, 5, 3, 2);
        let m = RtfMask::from_bits(vec![true; 3]);
        assert!(matches!(rtf_fuse(&mut tape, z1, z2, &[m]), Err(Error::Dimension(_))));
    }

    #[test]
    fn strategy_names_parse() {
        for s in FusionStrategy::ALL {
            assert_eq!(s.name().parse::<FusionStrategy>().unwrap(), s);
        }
        assert!("max".parse::<FusionStrategy>().is_err());
    }
}
