//! Graph/paragraph datasets: JSON-lines I/O, vocabulary building, and a
//! synthetic generator whose target text is a pure function of the graph.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    NeighborhoodRule, RawObject, RawRelation, RawSceneGraph, SceneGraph, GLOBAL_LABEL,
};
use crate::model::GraphInput;
use crate::vocab::{Vocabulary, BOS, EOS};

/// One dataset line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub graph: RawSceneGraph,
    pub paragraph: String,
}

/// Reads a JSON-lines dataset, validating every graph. Blank lines are
/// skipped but still counted for error positions.
pub fn read_dataset(path: &Path) -> Result<Vec<Record>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line).map_err(|e| match e {
            Error::Ingestion { context, message } => {
                Error::ingestion(format!("line {} ({context})", i + 1), message)
            }
            other => other,
        })?);
    }
    Ok(out)
}

pub fn parse_record(line: &str) -> Result<Record> {
    let record: Record = serde_json::from_str(line)
        .map_err(|e| Error::ingestion(format!("column {}", e.column()), e.to_string()))?;
    record.graph.validate()?;
    Ok(record)
}

pub fn write_dataset(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Label pools and size ranges for [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub objects: Vec<String>,
    pub attributes: Vec<String>,
    pub predicates: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_relations: usize,
    pub max_relations: usize,
    pub max_attributes: usize,
    pub seed: u64,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            objects: words("man woman dog cat ball tree car table cup kite"),
            attributes: words("red blue tall small old wooden"),
            predicates: words("holding near on under behind riding"),
            min_objects: 2,
            max_objects: 6,
            min_relations: 1,
            max_relations: 5,
            max_attributes: 2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Label pools in the JSON shape `{"objects": [...], "attributes": [...],
    /// "predicates": [...]}`, with every other field taken from `self`.
    pub fn with_pools(&self, json: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Pools {
            objects: Vec<String>,
            attributes: Vec<String>,
            predicates: Vec<String>,
        }
        let pools: Pools = serde_json::from_slice(json).map_err(|e| {
            Error::ingestion(
                format!("pools line {} column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        let spec = SyntheticSpec {
            objects: pools.objects,
            attributes: pools.attributes,
            predicates: pools.predicates,
            ..self.clone()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, pool) in [
            ("objects", &self.objects),
            ("attributes", &self.attributes),
            ("predicates", &self.predicates),
        ] {
            if pool.is_empty() {
                return Err(Error::ingestion(name, "label pool is empty"));
            }
            if let Some(bad) = pool
                .iter()
                .find(|w| w.is_empty() || w.split_whitespace().count() != 1)
            {
                return Err(Error::ingestion(
                    name,
                    format!("label \"{bad}\" is not a single token"),
                ));
            }
        }
        if self.min_objects < 2 || self.min_objects > self.max_objects {
            return Err(Error::contract("object range must satisfy 2 <= min <= max"));
        }
        if self.min_relations < 1 || self.min_relations > self.max_relations {
            return Err(Error::contract(
                "relation range must satisfy 1 <= min <= max",
            ));
        }
        Ok(())
    }
}

/// The target paragraph: one sentence
/// `the {attrs} {subject} {predicate} the {attrs} {object} .` per relation,
/// in relation order.
pub fn template(graph: &RawSceneGraph) -> String {
    let phrase = |id: &str| -> String {
        let obj = graph
            .objects
            .iter()
            .find(|o| o.id == id)
            .expect("relation endpoints are validated");
        let mut parts = vec!["the"];
        parts.extend(obj.attributes.iter().map(String::as_str));
        parts.push(&obj.label);
        parts.join(" ")
    };
    graph
        .relations
        .iter()
        .map(|r| {
            format!(
                "{} {} {} .",
                phrase(&r.subject),
                r.predicate,
                phrase(&r.object)
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Example `index` of the synthetic task. Relations always point from a
/// lower to a higher object index, so the graph is acyclic.
pub fn generate_one(spec: &SyntheticSpec, index: u64) -> Record {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let objects: Vec<RawObject> = (0..n)
        .map(|i| {
            let k = rng.random_range(0..=spec.max_attributes.min(spec.attributes.len()));
            RawObject {
                id: format!("o{i}"),
                label: spec
                    .objects
                    .choose(&mut rng)
                    .expect("validated pool")
                    .clone(),
                attributes: spec
                    .attributes
                    .choose_multiple(&mut rng, k)
                    .cloned()
                    .collect(),
            }
        })
        .collect();
    let r = rng.random_range(spec.min_relations..=spec.max_relations);
    let relations = (0..r)
        .map(|_| {
            let s = rng.random_range(0..n - 1);
            let o = rng.random_range(s + 1..n);
            RawRelation {
                subject: format!("o{s}"),
                predicate: spec
                    .predicates
                    .choose(&mut rng)
                    .expect("validated pool")
                    .clone(),
                object: format!("o{o}"),
            }
        })
        .collect();
    let graph = RawSceneGraph { objects, relations };
    let paragraph = template(&graph);
    Record { graph, paragraph }
}

/// Examples `0..count` of the synthetic task.
pub fn generate_synthetic(spec: &SyntheticSpec, count: usize) -> Result<Vec<Record>> {
    spec.validate()?;
    Ok((0..count as u64).map(|i| generate_one(spec, i)).collect())
}

/// Label vocabulary over graph labels (plus the global label) and token
/// vocabulary over target words, both in first-seen order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabs {
    pub labels: Vocabulary,
    pub tokens: Vocabulary,
}

impl Vocabs {
    pub fn build(records: &[Record]) -> Self {
        let mut labels = Vocabulary::build([GLOBAL_LABEL]);
        let mut tokens = Vocabulary::default();
        for r in records {
            for o in &r.graph.objects {
                labels.insert(&o.label);
            }
            for rel in &r.graph.relations {
                labels.insert(&rel.predicate);
            }
            for o in &r.graph.objects {
                for a in &o.attributes {
                    labels.insert(a);
                }
            }
            for t in crate::vocab::tokenize(&r.paragraph) {
                tokens.insert(&t);
            }
        }
        Vocabs { labels, tokens }
    }

    /// Labels of `graph` missing from the label vocabulary.
    pub fn unknown_labels<'a>(&self, graph: &'a RawSceneGraph) -> Vec<&'a str> {
        let mut out: Vec<&str> = graph
            .objects
            .iter()
            .flat_map(|o| {
                std::iter::once(o.label.as_str()).chain(o.attributes.iter().map(String::as_str))
            })
            .chain(graph.relations.iter().map(|r| r.predicate.as_str()))
            .filter(|l| self.labels.get(l).is_none())
            .collect();
        out.dedup();
        out
    }
}

/// An encoded training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: GraphInput,
    /// `BOS … EOS`.
    pub target: Vec<usize>,
}

impl Example {
    pub fn encode(record: &Record, vocabs: &Vocabs, rule: NeighborhoodRule) -> Result<Self> {
        let graph = SceneGraph::from_raw(&record.graph)?;
        let mut target = vec![BOS];
        target.extend(vocabs.tokens.encode(&record.paragraph));
        target.push(EOS);
        Ok(Example {
            input: GraphInput::from_graph(&graph, &vocabs.labels, rule),
            target,
        })
    }

    /// Number of predicted positions (everything after BOS).
    pub fn target_tokens(&self) -> usize {
        self.target.len() - 1
    }
}

pub fn encode_graph(
    graph: &RawSceneGraph,
    vocabs: &Vocabs,
    rule: NeighborhoodRule,
) -> Result<GraphInput> {
    Ok(GraphInput::from_graph(
        &SceneGraph::from_raw(graph)?,
        &vocabs.labels,
        rule,
    ))
}
