use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::shapeworld::{Cell, Dataset};

/// Attention and score maps for one expression. Score maps are row-major
/// over the scene's cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dump {
    pub scene_id: String,
    pub expression_index: usize,
    pub tokens: Vec<String>,
    pub grid_size: usize,
    pub a_subj: Option<Vec<f64>>,
    pub a_rel: Option<Vec<f64>>,
    pub a_obj: Option<Vec<f64>>,
    /// `s_subj` for the full model, `s_loc` for the baseline.
    pub subj_scores: Vec<f64>,
    /// `max_i s_pair(i, j)`; display only.
    pub obj_scores: Option<Vec<f64>>,
    pub best_subject: Cell,
    pub best_object: Option<Cell>,
    pub gt_subject: Cell,
    pub gt_object: Option<Cell>,
}

impl Dump {
    /// Token / attention table followed by the score grids.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} #{}: {}", self.scene_id, self.expression_index, self.tokens.join(" "));
        if let (Some(a), Some(r), Some(o)) = (&self.a_subj, &self.a_rel, &self.a_obj) {
            let _ = writeln!(s, "{:>10} {:>6} {:>6} {:>6}", "token", "subj", "rel", "obj");
            for (t, tok) in self.tokens.iter().enumerate() {
                let _ = writeln!(s, "{:>10} {:>6.3} {:>6.3} {:>6.3}", tok, a[t], r[t], o[t]);
            }
        }
        let _ = writeln!(s, "subject scores (best {}, gt {}):", self.best_subject, self.gt_subject);
        s.push_str(&render_grid(&self.subj_scores, self.grid_size));
        if let Some(o) = &self.obj_scores {
            let best = self.best_object.map_or("-".into(), |c| c.to_string());
            let gt = self.gt_object.map_or("-".into(), |c| c.to_string());
            let _ = writeln!(s, "object scores (best {best}, gt {gt}):");
            s.push_str(&render_grid(o, self.grid_size));
        }
        s
    }
}

/// Plain-text grid, row 0 on top.
pub fn render_grid(scores: &[f64], grid_size: usize) -> String {
    let mut s = String::new();
    for row in scores.chunks(grid_size.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>8.3}")).collect();
        let _ = writeln!(s, "{}", cells.join(" "));
    }
    s
}

/// Total attention on the tokens that spell `phrase`, taking the first
/// contiguous occurrence; `None` if the phrase does not occur.
pub fn relation_span_weight(tokens: &[String], attention: &[f64], phrase: &[&str]) -> Option<f64> {
    if phrase.is_empty() || phrase.len() > tokens.len() {
        return None;
    }
    (0..=tokens.len() - phrase.len())
        .find(|&k| tokens[k..k + phrase.len()].iter().zip(phrase).all(|(a, b)| a == b))
        .map(|k| attention[k..k + phrase.len()].iter().sum())
}

pub fn inspect(model: &Model, data: &Dataset, scene_id: &str, expression_index: usize) -> Result<Dump> {
    let scene = data
        .find(scene_id)
        .ok_or_else(|| Error::NotFound(format!("scene {scene_id}")))?;
    let expr = scene.expressions.get(expression_index).ok_or_else(|| {
        Error::NotFound(format!(
            "expression {expression_index} in scene {scene_id} ({} expressions)",
            scene.expressions.len()
        ))
    })?;
    let input = model.scene_input(scene)?;
    let pred = model
        .predict(&input)?
        .into_iter()
        .nth(expression_index)
        .expect("one prediction per expression");
    let cells = &input.candidates.cells;
    Ok(Dump {
        scene_id: scene_id.to_string(),
        expression_index,
        tokens: expr.tokens.clone(),
        grid_size: scene.scene.grid_size,
        a_subj: pred.parsed.as_ref().map(|p| p.a_subj.clone()),
        a_rel: pred.parsed.as_ref().map(|p| p.a_rel.clone()),
        a_obj: pred.parsed.as_ref().map(|p| p.a_obj.clone()),
        subj_scores: pred.unary,
        obj_scores: pred.table.as_ref().map(|t| t.obj_scores.clone()),
        best_subject: cells[pred.subject],
        best_object: pred.object.map(|j| cells[j]),
        gt_subject: expr.subject_cell,
        gt_object: expr.object_cell,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_weight() {
        let toks: Vec<String> = "the red circle right of a square".split(' ').map(String::from).collect();
        let a = [0.0, 0.1, 0.1, 0.3, 0.3, 0.1, 0.1];
        assert!((relation_span_weight(&toks, &a, &["right", "of"]).unwrap() - 0.6).abs() < 1e-15);
        assert!(relation_span_weight(&toks, &a, &["above"]).is_none());
    }

    #[test]
    fn grid_has_one_line_per_row() {
        let g = render_grid(&[0.0; 6], 3);
        assert_eq!(g.lines().count(), 2);
    }
}
