//! Structured scene prompts and their text grammar.
//!
//! ```text
//! prompt := reqs [ ", arranged as " band ( "; " band )* ]
//! band   := reqs " in the " [ ("top" | "middle" | "bottom") " " ] "rows " A "-" B
//! reqs   := req ( " and " req )*
//! req    := COUNT " " COLOR " " SHAPE[s]
//! ```
//!
//! Band rows are inclusive in text and refer to the full final canvas.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::palette::{Color, ObjectType, Shape};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("cannot parse prompt: {0}")]
    Parse(String),
    #[error("invalid prompt: {0}")]
    Invalid(String),
}

/// Per-type object counts.
pub type Quotas = BTreeMap<ObjectType, u32>;

/// Per-band quota table over a row range of the final canvas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directive {
    pub rows: Range<usize>,
    pub quotas: Quotas,
}

impl Directive {
    pub fn covers_row(&self, row: usize) -> bool {
        self.rows.contains(&row)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScenePrompt {
    requirements: Quotas,
    directives: Vec<Directive>,
}

impl ScenePrompt {
    pub fn new(requirements: Quotas, mut directives: Vec<Directive>) -> Result<Self, PromptError> {
        directives.sort_by_key(|d| d.rows.start);
        let prompt = Self { requirements, directives };
        prompt.validate()?;
        Ok(prompt)
    }

    /// Prompt with no layout.
    pub fn counts(requirements: impl IntoIterator<Item = (ObjectType, u32)>) -> Self {
        Self { requirements: requirements.into_iter().collect(), directives: Vec::new() }
    }

    pub fn requirements(&self) -> &Quotas {
        &self.requirements
    }

    pub fn directives(&self) -> &[Directive] {
        &self.directives
    }

    pub fn has_directives(&self) -> bool {
        !self.directives.is_empty()
    }

    pub fn is_required(&self, ty: ObjectType) -> bool {
        self.requirements.contains_key(&ty)
    }

    pub fn total_objects(&self) -> u32 {
        self.requirements.values().sum()
    }

    pub fn directive_for_row(&self, row: usize) -> Option<&Directive> {
        self.directives.iter().find(|d| d.covers_row(row))
    }

    /// Copy with directives replaced.
    pub fn with_directives(&self, directives: Vec<Directive>) -> Result<Self, PromptError> {
        Self::new(self.requirements.clone(), directives)
    }

    /// Copy with directives removed.
    pub fn without_directives(&self) -> Self {
        Self { requirements: self.requirements.clone(), directives: Vec::new() }
    }

    fn validate(&self) -> Result<(), PromptError> {
        if self.requirements.is_empty() && !self.directives.is_empty() {
            return Err(PromptError::Invalid("directives without requirements".into()));
        }
        for d in &self.directives {
            if d.rows.is_empty() {
                return Err(PromptError::Invalid(format!("empty band {:?}", d.rows)));
            }
            if d.quotas.keys().ne(self.requirements.keys()) {
                return Err(PromptError::Invalid(format!(
                    "band {:?} must list every required type exactly once",
                    d.rows
                )));
            }
        }
        for pair in self.directives.windows(2) {
            if pair[0].rows.end > pair[1].rows.start {
                return Err(PromptError::Invalid(format!(
                    "bands {:?} and {:?} overlap",
                    pair[0].rows, pair[1].rows
                )));
            }
        }
        if !self.directives.is_empty() {
            for (ty, &total) in &self.requirements {
                let sum: u32 = self.directives.iter().map(|d| d.quotas[ty]).sum();
                if sum != total {
                    return Err(PromptError::Invalid(format!(
                        "band quotas for {ty} sum to {sum}, expected {total}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Human-readable form; parses back to an equal prompt.
    pub fn text_form(&self) -> String {
        self.to_string()
    }
}

fn write_reqs(f: &mut fmt::Formatter<'_>, quotas: &Quotas) -> fmt::Result {
    for (i, (ty, n)) in quotas.iter().enumerate() {
        if i > 0 {
            f.write_str(" and ")?;
        }
        let noun = if *n == 1 { ty.shape.singular() } else { ty.shape.plural() };
        write!(f, "{n} {} {noun}", ty.color.name())?;
    }
    Ok(())
}

impl fmt::Display for ScenePrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_reqs(f, &self.requirements)?;
        if self.directives.is_empty() {
            return Ok(());
        }
        f.write_str(", arranged as ")?;
        let last = self.directives.len() - 1;
        for (i, d) in self.directives.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write_reqs(f, &d.quotas)?;
            let place = match (i, last) {
                (_, 0) => "",
                (0, _) => "top ",
                (i, l) if i == l => "bottom ",
                _ => "middle ",
            };
            write!(f, " in the {place}rows {}-{}", d.rows.start, d.rows.end - 1)?;
        }
        Ok(())
    }
}

fn parse_err(msg: impl Into<String>) -> PromptError {
    PromptError::Parse(msg.into())
}

fn parse_reqs(s: &str) -> Result<Quotas, PromptError> {
    let mut out = Quotas::new();
    for item in s.split(" and ") {
        let mut words = item.split(' ');
        let (Some(n), Some(color), Some(shape), None) =
            (words.next(), words.next(), words.next(), words.next())
        else {
            return Err(parse_err(format!("expected `<count> <color> <shape>`, got `{item}`")));
        };
        let n: u32 = n.parse().map_err(|_| parse_err(format!("bad count `{n}`")))?;
        let color = Color::from_str(color).map_err(parse_err)?;
        let shape = Shape::from_str(shape).map_err(parse_err)?;
        let expected = if n == 1 { shape.singular() } else { shape.plural() };
        let got = item.rsplit(' ').next().unwrap_or_default();
        if got != expected {
            return Err(parse_err(format!("`{got}` does not agree with count {n}")));
        }
        if out.insert(ObjectType::new(color, shape), n).is_some() {
            return Err(parse_err(format!("type repeated in `{s}`")));
        }
    }
    Ok(out)
}

fn parse_band(s: &str) -> Result<Directive, PromptError> {
    let (reqs, loc) = s
        .rsplit_once(" in the ")
        .ok_or_else(|| parse_err(format!("band `{s}` lacks `in the ... rows`")))?;
    let loc = ["top ", "middle ", "bottom "]
        .iter()
        .find_map(|p| loc.strip_prefix(p))
        .unwrap_or(loc);
    let range = loc
        .strip_prefix("rows ")
        .ok_or_else(|| parse_err(format!("band location `{loc}` lacks `rows`")))?;
    let (a, b) = range
        .split_once('-')
        .ok_or_else(|| parse_err(format!("bad row range `{range}`")))?;
    let a: usize = a.parse().map_err(|_| parse_err(format!("bad row `{a}`")))?;
    let b: usize = b.parse().map_err(|_| parse_err(format!("bad row `{b}`")))?;
    if b < a {
        return Err(parse_err(format!("row range `{range}` is reversed")));
    }
    Ok(Directive { rows: a..b + 1, quotas: parse_reqs(reqs)? })
}

impl FromStr for ScenePrompt {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(Self::default());
        }
        let (reqs, layout) = match s.split_once(", arranged as ") {
            Some((r, l)) => (r, Some(l)),
            None => (s, None),
        };
        let requirements = parse_reqs(reqs)?;
        let directives = match layout {
            Some(l) => l.split("; ").map(parse_band).collect::<Result<Vec<_>, _>>()?,
            None => Vec::new(),
        };
        Self::new(requirements, directives)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RED_SQUARE: ObjectType = ObjectType::new(Color::Red, Shape::Square);
    const BLUE_CIRCLE: ObjectType = ObjectType::new(Color::Blue, Shape::Circle);

    #[test]
    fn plain_counting_prompt() {
        let p: ScenePrompt = "8 red squares".parse().unwrap();
        assert_eq!(p.requirements()[&RED_SQUARE], 8);
        assert!(!p.has_directives());
        assert_eq!(p.text_form(), "8 red squares");
    }

    #[test]
    fn singular_and_multi_type() {
        let p: ScenePrompt = "1 red square and 3 blue circles".parse().unwrap();
        assert_eq!(p.total_objects(), 4);
        assert_eq!(p.to_string(), "1 red square and 3 blue circles");
        assert!("1 red squares".parse::<ScenePrompt>().is_err());
        assert!("2 red square".parse::<ScenePrompt>().is_err());
    }

    #[test]
    fn layout_round_trip() {
        let text = "8 red squares, arranged as 3 red squares in the top rows 0-3; 5 red squares in the bottom rows 4-15";
        let p: ScenePrompt = text.parse().unwrap();
        assert_eq!(p.directives().len(), 2);
        assert_eq!(p.directives()[1].rows, 4..16);
        assert_eq!(p.to_string(), text);
    }

    #[test]
    fn three_band_layout_round_trip() {
        let mut top = Quotas::new();
        top.insert(RED_SQUARE, 1);
        top.insert(BLUE_CIRCLE, 0);
        let mut mid = top.clone();
        mid.insert(RED_SQUARE, 0);
        let mut bottom = top.clone();
        bottom.insert(BLUE_CIRCLE, 2);
        let p = ScenePrompt::new(
            [(RED_SQUARE, 2), (BLUE_CIRCLE, 2)].into_iter().collect(),
            vec![
                Directive { rows: 0..4, quotas: top },
                Directive { rows: 4..8, quotas: mid },
                Directive { rows: 8..16, quotas: bottom },
            ],
        )
        .unwrap();
        let text = p.text_form();
        assert!(text.contains("in the middle rows 4-7"));
        assert_eq!(text.parse::<ScenePrompt>().unwrap(), p);
    }

    #[test]
    fn rejects_inconsistent_layouts() {
        // quotas do not sum to the total
        assert!("8 red squares, arranged as 3 red squares in the top rows 0-3; 4 red squares in the bottom rows 4-15"
            .parse::<ScenePrompt>()
            .is_err());
        // overlapping bands
        assert!("2 red squares, arranged as 1 red square in the top rows 0-4; 1 red square in the bottom rows 4-15"
            .parse::<ScenePrompt>()
            .is_err());
        // band missing a required type
        assert!("2 red squares and 1 blue circle, arranged as 2 red squares in the rows 0-15"
            .parse::<ScenePrompt>()
            .is_err());
    }

    #[test]
    fn empty_text_is_empty_prompt() {
        let p: ScenePrompt = "".parse().unwrap();
        assert!(p.requirements().is_empty());
        assert_eq!(p.to_string(), "");
    }
}
