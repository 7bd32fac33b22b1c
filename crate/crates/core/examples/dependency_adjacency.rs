//! Gold dependency adjacency for a question, at word and subword level.

use deformqa::dependency::{build_adjacency, reindex_for_subwords, DependencyParse};

const PARSE: &str = "\
# form  governor  subwords
what      1  1
happened -1  2
before    1  1
jumping   2  3
";

fn main() -> deformqa::Result<()> {
    let parse = DependencyParse::from_lines(PARSE)?;
    println!("words:    {:?}", parse.words);
    println!("subwords: {:?}", parse.subwords().collect::<Vec<_>>());

    let words = build_adjacency(&parse)?;
    println!("\nword-level targets {:?}\n{}", words.targets(), words.render());

    let subwords = reindex_for_subwords(&parse)?;
    println!("subword-level targets {:?}\n{}", subwords.targets(), subwords.render());

    // [CLS] in front and [SEP] behind attend to themselves.
    let padded = subwords.with_specials(1, 1);
    println!("with special tokens: {:?}", padded.targets());
    Ok(())
}
