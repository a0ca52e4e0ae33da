//! Scene graphs ingested from a line-record file.
//!
//! Format: `E <id> <attr>* <head>` declares an entity, then
//! `R <subj-id> <pred words...> <obj-id>` declares a relation.

use std::path::Path;

use crate::error::{Result, SdgError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub attrs: Vec<String>,
    pub head: String,
}

impl Entity {
    /// Attribute words followed by the head noun.
    pub fn span(&self) -> String {
        let mut parts = self.attrs.clone();
        parts.push(self.head.clone());
        parts.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub subject: usize,
    pub predicate: Vec<String>,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SceneGraph {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
}

impl SceneGraph {
    pub fn validate(&self) -> Result<()> {
        for r in &self.relations {
            if r.subject >= self.entities.len() {
                return Err(SdgError::DanglingRelation(r.subject));
            }
            if r.object >= self.entities.len() {
                return Err(SdgError::DanglingRelation(r.object));
            }
        }
        Ok(())
    }
}

/// One span per entity (attributes + head), then one span per relation
/// (subject span + predicate + object span), in declaration order.
pub fn extract_scene_graph_spans(graph: &SceneGraph) -> Result<Vec<String>> {
    graph.validate()?;
    let mut spans: Vec<String> = graph.entities.iter().map(Entity::span).collect();
    for r in &graph.relations {
        let mut parts = vec![graph.entities[r.subject].span()];
        parts.extend(r.predicate.iter().cloned());
        parts.push(graph.entities[r.object].span());
        spans.push(parts.join(" "));
    }
    Ok(spans)
}

pub fn parse_scene_graph(text: &str) -> Result<SceneGraph> {
    let mut graph = SceneGraph::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| SdgError::SyntaxError {
            line: lineno + 1,
            col: 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "E" => {
                if fields.len() < 3 {
                    return Err(err("entity line needs at least an id and a head word"));
                }
                let id: usize = fields[1]
                    .parse()
                    .map_err(|_| err("entity id must be an integer"))?;
                if id != graph.entities.len() {
                    return Err(err(&format!(
                        "entity ids must be declared in order, expected {}",
                        graph.entities.len()
                    )));
                }
                let words = &fields[2..];
                graph.entities.push(Entity {
                    attrs: words[..words.len() - 1].iter().map(|s| s.to_string()).collect(),
                    head: words[words.len() - 1].to_string(),
                });
            }
            "R" => {
                if fields.len() < 4 {
                    return Err(err("relation line needs subject, predicate, object"));
                }
                let subject: usize = fields[1]
                    .parse()
                    .map_err(|_| err("relation subject must be an integer"))?;
                let object: usize = fields[fields.len() - 1]
                    .parse()
                    .map_err(|_| err("relation object must be an integer"))?;
                let predicate: Vec<String> =
                    fields[2..fields.len() - 1].iter().map(|s| s.to_string()).collect();
                if predicate.is_empty() {
                    return Err(err("relation predicate is empty"));
                }
                graph.relations.push(Relation { subject, predicate, object });
            }
            other => return Err(err(&format!("unknown record type '{other}'"))),
        }
    }
    graph.validate()?;
    Ok(graph)
}

pub fn load_scene_graph(path: &Path) -> Result<SceneGraph> {
    let text = std::fs::read_to_string(path)?;
    parse_scene_graph(&text)
}
