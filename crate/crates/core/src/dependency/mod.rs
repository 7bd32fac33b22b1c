//! Dependency structure of questions and the gold attention it induces.
//!
//! A parse stores, per word, the index of its governor (`None` for the
//! root) and how many subwords the word was split into. The gold adjacency
//! has `A[i, g] = 1` when `g` governs `i`; the root and any special token
//! attend to themselves, so every row is one-hot.
//!
//! After subword splitting, the rightmost piece of a word inherits the
//! word's governor (pointing at the governor word's rightmost piece) and
//! every other piece points at its right neighbour.
//!
//! Parse files hold one token per line with three whitespace-separated
//! columns: surface form, 0-based governor index (`-1` for the root) and
//! subword count. Blank lines separate questions; `#` starts a comment.

pub mod encoder;

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use encoder::{DepConfig, DepMode, DependencyEncoder, DependencyHead, EncoderOutput};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyParse {
    pub words: Vec<String>,
    pub governors: Vec<Option<usize>>,
    /// Subword pieces of each word; continuation pieces carry a `##` prefix.
    pub segments: Vec<Vec<String>>,
}

/// Splits `word` into `n` contiguous pieces of near-equal length, longer
/// pieces first, marking continuations with `##`. Words shorter than `n`
/// characters yield empty continuation pieces.
pub fn split_word(word: &str, n: usize) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = n.max(1);
    let (base, extra) = (chars.len() / n, chars.len() % n);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let len = base + usize::from(i < extra);
        let piece: String = chars[start..start + len].iter().collect();
        out.push(if i == 0 { piece } else { format!("##{piece}") });
        start += len;
    }
    out
}

impl DependencyParse {
    /// Builds and validates a parse whose words are split into
    /// `subword_counts[i]` pieces by [`split_word`].
    pub fn new(words: Vec<String>, governors: Vec<Option<usize>>, subword_counts: &[usize]) -> Result<Self> {
        if subword_counts.len() != words.len() {
            return Err(Error::Parse(format!(
                "{} words but {} subword counts",
                words.len(),
                subword_counts.len()
            )));
        }
        if let Some(i) = subword_counts.iter().position(|&c| c == 0) {
            return Err(Error::Parse(format!(
                "word {i} (`{}`) has an empty segmentation",
                words[i]
            )));
        }
        let segments = words
            .iter()
            .zip(subword_counts)
            .map(|(w, &c)| split_word(w, c))
            .collect();
        Self::with_segments(words, governors, segments)
    }

    pub fn with_segments(
        words: Vec<String>,
        governors: Vec<Option<usize>>,
        segments: Vec<Vec<String>>,
    ) -> Result<Self> {
        let p = Self {
            words,
            governors,
            segments,
        };
        p.validate()?;
        Ok(p)
    }

    /// A parse where every word is a single subword.
    pub fn unsplit(words: &[&str], governors: &[Option<usize>]) -> Result<Self> {
        Self::new(
            words.iter().map(|w| w.to_string()).collect(),
            governors.to_vec(),
            &vec![1; words.len()],
        )
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn num_subwords(&self) -> usize {
        self.segments.iter().map(Vec::len).sum()
    }

    pub fn subwords(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().flatten().map(String::as_str)
    }

    pub fn root(&self) -> Option<usize> {
        self.governors.iter().position(Option::is_none)
    }

    /// Checks: one root, governors in range, no cycles, non-empty segments.
    pub fn validate(&self) -> Result<()> {
        let n = self.words.len();
        if n == 0 {
            return Err(Error::Parse("empty parse".into()));
        }
        if self.governors.len() != n || self.segments.len() != n {
            return Err(Error::Parse(format!(
                "{n} words but {} governors and {} segmentations",
                self.governors.len(),
                self.segments.len()
            )));
        }
        let roots = self.governors.iter().filter(|g| g.is_none()).count();
        if roots != 1 {
            return Err(Error::Parse(format!("expected exactly one root, found {roots}")));
        }
        for (i, g) in self.governors.iter().enumerate() {
            match g {
                Some(g) if *g >= n => return Err(Error::Parse(format!("word {i} has governor {g} outside 0..{n}"))),
                Some(g) if *g == i => return Err(Error::Parse(format!("word {i} governs itself"))),
                _ => {}
            }
        }
        for start in 0..n {
            let mut at = start;
            let mut steps = 0;
            while let Some(g) = self.governors[at] {
                at = g;
                steps += 1;
                if steps > n {
                    return Err(Error::Parse(format!("cycle through word {start}")));
                }
            }
        }
        if let Some(i) = self.segments.iter().position(Vec::is_empty) {
            return Err(Error::Parse(format!(
                "word {i} (`{}`) has an empty segmentation",
                self.words[i]
            )));
        }
        Ok(())
    }

    /// Reads one question in the three-column format.
    pub fn from_lines(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        let mut governors = Vec::new();
        let mut counts = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let [form, gov, count] = cols[..] else {
                return Err(Error::Parse(format!(
                    "line {}: expected 3 columns (form, governor, subwords), got {}",
                    lineno + 1,
                    cols.len()
                )));
            };
            let gov: i64 = gov
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad governor `{gov}`", lineno + 1)))?;
            let count: usize = count
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad subword count `{count}`", lineno + 1)))?;
            words.push(form.to_string());
            governors.push(match gov {
                -1 => None,
                g if g >= 0 => Some(g as usize),
                g => return Err(Error::Parse(format!("line {}: governor {g} < -1", lineno + 1))),
            });
            counts.push(count);
        }
        Self::new(words, governors, &counts)
    }

    /// Reads blank-line separated questions.
    pub fn parse_file(text: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        let mut block = String::new();
        for line in text.lines().chain(std::iter::once("")) {
            if line.trim().is_empty() {
                if !block.trim().is_empty() {
                    out.push(Self::from_lines(&block)?);
                }
                block.clear();
            } else {
                block.push_str(line);
                block.push('\n');
            }
        }
        Ok(out)
    }

    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for i in 0..self.len() {
            let gov = self.governors[i].map_or(-1, |g| g as i64);
            let _ = writeln!(s, "{} {} {}", self.words[i], gov, self.segments[i].len());
        }
        s
    }
}

/// A square 0/1 matrix with exactly one 1 per row, stored as the column
/// index of that 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    targets: Vec<usize>,
}

impl AdjacencyMatrix {
    pub fn from_targets(targets: Vec<usize>) -> Result<Self> {
        let n = targets.len();
        if let Some(i) = targets.iter().position(|&t| t >= n) {
            return Err(Error::InvalidInput(format!(
                "row {i} points at {} outside 0..{n}",
                targets[i]
            )));
        }
        Ok(Self { targets })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            targets: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Column of the 1 in row `i`.
    pub fn target(&self, i: usize) -> usize {
        self.targets[i]
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        u8::from(self.targets[row] == col)
    }

    /// Adds `leading` and `trailing` self-attending rows around the matrix.
    pub fn with_specials(&self, leading: usize, trailing: usize) -> Self {
        let mut targets: Vec<usize> = (0..leading).collect();
        targets.extend(self.targets.iter().map(|t| t + leading));
        let n = targets.len();
        targets.extend(n..n + trailing);
        Self { targets }
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        (0..self.len())
            .map(|i| (0..self.len()).map(|j| self.get(i, j)).collect())
            .collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        let n = self.len();
        let mut data = vec![0.0; n * n];
        for (i, &t) in self.targets.iter().enumerate() {
            data[i * n + t] = 1.0;
        }
        Tensor::new(vec![n, n], data).expect("square matrix")
    }

    /// Whitespace-separated 0/1 grid, one row per line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for row in self.to_dense() {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    /// Whether following targets from every row ends in a self-loop.
    pub fn all_reach_fixed_point(&self) -> bool {
        let n = self.len();
        (0..n).all(|start| {
            let mut at = start;
            for _ in 0..=n {
                if self.targets[at] == at {
                    return true;
                }
                at = self.targets[at];
            }
            false
        })
    }
}

/// Word-level gold adjacency.
pub fn build_adjacency(parse: &DependencyParse) -> Result<AdjacencyMatrix> {
    parse.validate()?;
    let targets = parse
        .governors
        .iter()
        .enumerate()
        .map(|(i, g)| g.unwrap_or(i))
        .collect();
    AdjacencyMatrix::from_targets(targets)
}

/// Subword-level gold adjacency.
pub fn reindex_for_subwords(parse: &DependencyParse) -> Result<AdjacencyMatrix> {
    parse.validate()?;
    let mut offsets = Vec::with_capacity(parse.len());
    let mut total = 0;
    for seg in &parse.segments {
        offsets.push(total);
        total += seg.len();
    }
    let rightmost = |w: usize| offsets[w] + parse.segments[w].len() - 1;
    let mut targets = Vec::with_capacity(total);
    for (w, seg) in parse.segments.iter().enumerate() {
        for piece in 0..seg.len() {
            let idx = offsets[w] + piece;
            targets.push(if piece + 1 < seg.len() {
                idx + 1
            } else {
                match parse.governors[w] {
                    Some(g) => rightmost(g),
                    None => idx,
                }
            });
        }
    }
    AdjacencyMatrix::from_targets(targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_level_examples() {
        let single = DependencyParse::unsplit(&["run"], &[None]).unwrap();
        assert_eq!(build_adjacency(&single).unwrap().to_dense(), vec![vec![1]]);
        let chain = DependencyParse::unsplit(&["a", "b", "c"], &[None, Some(0), Some(1)]).unwrap();
        assert_eq!(
            build_adjacency(&chain).unwrap().to_dense(),
            vec![vec![1, 0, 0], vec![1, 0, 0], vec![0, 1, 0]]
        );
    }

    #[test]
    fn invalid_parses() {
        assert!(DependencyParse::unsplit(&["a", "b"], &[None, None]).is_err());
        assert!(DependencyParse::unsplit(&["a", "b"], &[Some(1), Some(0)]).is_err());
        assert!(DependencyParse::unsplit(&["a", "b", "c"], &[None, Some(2), Some(1)]).is_err());
        assert!(DependencyParse::unsplit(&["a"], &[Some(3)]).is_err());
        let err = DependencyParse::new(vec!["a".into()], vec![None], &[0]).unwrap_err();
        assert!(err.to_string().contains("empty segmentation"));
    }

    #[test]
    fn subword_example() {
        // "man standing": "standing" is the root, split as stand + ##ing.
        let p = DependencyParse::with_segments(
            vec!["man".into(), "standing".into()],
            vec![Some(1), None],
            vec![vec!["man".into()], vec!["stand".into(), "##ing".into()]],
        )
        .unwrap();
        let a = reindex_for_subwords(&p).unwrap();
        assert_eq!(a.targets(), &[2, 2, 2]);
        // and the other direction: the split word is the dependent.
        let p = DependencyParse::with_segments(
            vec!["standing".into(), "man".into()],
            vec![Some(1), None],
            vec![vec!["stand".into(), "##ing".into()], vec!["man".into()]],
        )
        .unwrap();
        assert_eq!(reindex_for_subwords(&p).unwrap().targets(), &[1, 2, 2]);
    }

    #[test]
    fn three_piece_chain() {
        let p = DependencyParse::new(vec!["x".into(), "abcdef".into()], vec![None, Some(0)], &[1, 3]).unwrap();
        assert_eq!(p.segments[1], vec!["ab", "##cd", "##ef"]);
        assert_eq!(reindex_for_subwords(&p).unwrap().targets(), &[0, 2, 3, 0]);
    }

    #[test]
    fn specials_are_diagonal() {
        let a = AdjacencyMatrix::from_targets(vec![1, 1]).unwrap().with_specials(1, 1);
        assert_eq!(a.targets(), &[0, 2, 2, 3]);
        assert!(a.all_reach_fixed_point());
    }

    #[test]
    fn file_round_trip() {
        let text = "# q1\nwhat 1 1\nhappened -1 1\nbefore 1 1\nrunning 2 2\n\nhi -1 1\n";
        let parses = DependencyParse::parse_file(text).unwrap();
        assert_eq!(parses.len(), 2);
        assert_eq!(parses[0].segments[3], vec!["runn", "##ing"]);
        let again = DependencyParse::from_lines(&parses[0].to_lines()).unwrap();
        assert_eq!(again, parses[0]);
        assert!(DependencyParse::from_lines("a -1").is_err());
        assert!(DependencyParse::from_lines("a x 1").is_err());
    }

    #[test]
    fn render_grid() {
        let a = AdjacencyMatrix::from_targets(vec![0, 0]).unwrap();
        assert_eq!(a.render(), "1 0\n1 0\n");
    }
}
