//! Position and type embeddings added to patch tokens.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::snn::rpm::TokenType;

/// `tokens + pos[positions] + types[token_types]`, broadcast over a leading
/// batch axis when `tokens` is `[B, N, D]`.
pub fn add_embeddings(
    tape: &mut Tape,
    tokens: Var,
    pos_table: Var,
    type_table: Var,
    positions: &[usize],
    token_types: &[TokenType],
) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() < 2 {
        return Err(Error::shape("add_embeddings", format!("tokens need shape [.., N, D], got {shape:?}")));
    }
    let n = shape[shape.len() - 2];
    if positions.len() != n || token_types.len() != n {
        return Err(Error::shape(
            "add_embeddings",
            format!("{n} tokens but {} positions and {} type labels", positions.len(), token_types.len()),
        ));
    }
    let rows = tape.shape(pos_table)[0];
    if let Some(&p) = positions.iter().find(|&&p| p >= rows) {
        return Err(Error::shape("add_embeddings", format!("position {p} outside a table of {rows} rows")));
    }
    let pe = tape.index_select(pos_table, 0, positions)?;
    let type_rows: Vec<usize> = token_types.iter().map(|t| t.index()).collect();
    let te = tape.index_select(type_table, 0, &type_rows)?;
    let e = tape.add(pe, te)?;
    tape.add(tokens, e)
}
