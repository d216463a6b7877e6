use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::canvas::TokenId;

/// The background token is always id 0.
pub const BACKGROUND: TokenId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 170, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [230, 200, 40],
        }
    }
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn singular(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Shape::Square => "squares",
            Shape::Circle => "circles",
            Shape::Triangle => "triangles",
        }
    }
}

impl FromStr for Color {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Color::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown color `{s}`"))
    }
}

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Shape::ALL
            .into_iter()
            .find(|sh| sh.singular() == s || sh.plural() == s)
            .ok_or_else(|| format!("unknown shape `{s}`"))
    }
}

/// A (color, shape) object kind. One object occupies exactly one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectType {
    pub color: Color,
    pub shape: Shape,
}

impl ObjectType {
    pub const fn new(color: Color, shape: Shape) -> Self {
        Self { color, shape }
    }
}

impl fmt::Display for ObjectType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.color.name(), self.shape.singular())
    }
}

/// Mapping between object types and codebook ids.
///
/// Id 0 is background; object ids follow in color-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    colors: Vec<Color>,
    shapes: Vec<Shape>,
}

impl Default for Palette {
    fn default() -> Self {
        Self { colors: Color::ALL.to_vec(), shapes: Shape::ALL.to_vec() }
    }
}

impl Palette {
    pub fn new(colors: Vec<Color>, shapes: Vec<Shape>) -> Self {
        assert!(!colors.is_empty() && !shapes.is_empty(), "palette needs a color and a shape");
        Self { colors, shapes }
    }

    /// Codebook size including background.
    pub fn k(&self) -> usize {
        1 + self.colors.len() * self.shapes.len()
    }

    pub fn colors(&self) -> &[Color] {
        &self.colors
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn token_of(&self, ty: ObjectType) -> Option<TokenId> {
        let ci = self.colors.iter().position(|&c| c == ty.color)?;
        let si = self.shapes.iter().position(|&s| s == ty.shape)?;
        Some((1 + ci * self.shapes.len() + si) as TokenId)
    }

    pub fn object_of(&self, token: TokenId) -> Option<ObjectType> {
        if token == BACKGROUND || token as usize >= self.k() {
            return None;
        }
        let idx = token as usize - 1;
        let n = self.shapes.len();
        Some(ObjectType::new(self.colors[idx / n], self.shapes[idx % n]))
    }

    pub fn object_types(&self) -> impl Iterator<Item = ObjectType> + '_ {
        self.colors
            .iter()
            .flat_map(move |&c| self.shapes.iter().map(move |&s| ObjectType::new(c, s)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_palette_has_13_tokens() {
        let p = Palette::default();
        assert_eq!(p.k(), 13);
        for t in 1..13 {
            let ty = p.object_of(t).unwrap();
            assert_eq!(p.token_of(ty), Some(t));
        }
        assert_eq!(p.object_of(BACKGROUND), None);
        assert_eq!(p.object_of(13), None);
    }

    #[test]
    fn tiny_palette() {
        let p = Palette::new(vec![Color::Red], vec![Shape::Square, Shape::Circle]);
        assert_eq!(p.k(), 3);
        assert_eq!(p.token_of(ObjectType::new(Color::Blue, Shape::Square)), None);
    }
}
