use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{EntityPath, ModelError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaNode {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<SchemaNode>,
    #[serde(default)]
    pub repeatable: bool,
    #[serde(default)]
    pub description: String,
}

impl SchemaNode {
    pub fn leaf(name: &str, description: &str) -> Self {
        Self {
            name: name.to_string(),
            children: Vec::new(),
            repeatable: false,
            description: description.to_string(),
        }
    }

    pub fn group(name: &str, repeatable: bool, description: &str, children: Vec<SchemaNode>) -> Self {
        Self {
            name: name.to_string(),
            children,
            repeatable,
            description: description.to_string(),
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn child(&self, name: &str) -> Option<&SchemaNode> {
        self.children.iter().find(|c| c.name == name)
    }
}

/// Hierarchical tree of the entities to extract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr")]
pub struct DocumentSchema {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub roots: Vec<SchemaNode>,
}

#[derive(Deserialize)]
struct SchemaRepr {
    name: String,
    #[serde(default)]
    description: String,
    roots: Vec<SchemaNode>,
}

impl TryFrom<SchemaRepr> for DocumentSchema {
    type Error = ModelError;

    fn try_from(r: SchemaRepr) -> Result<Self, Self::Error> {
        DocumentSchema::new(r.name, r.description, r.roots)
    }
}

fn check_siblings(nodes: &[SchemaNode], at: &str) -> Result<(), ModelError> {
    let mut seen = BTreeSet::new();
    for n in nodes {
        if n.name.is_empty() || n.name.contains('.') {
            return Err(ModelError::InvalidSchema(format!("bad node name {:?} under {at}", n.name)));
        }
        if !seen.insert(n.name.as_str()) {
            return Err(ModelError::InvalidSchema(format!("duplicate node {:?} under {at}", n.name)));
        }
        check_siblings(&n.children, &format!("{at}.{}", n.name))?;
    }
    Ok(())
}

impl DocumentSchema {
    pub fn new(
        name: impl Into<String>,
        description: impl Into<String>,
        roots: Vec<SchemaNode>,
    ) -> Result<Self, ModelError> {
        let schema = Self {
            name: name.into(),
            description: description.into(),
            roots,
        };
        check_siblings(&schema.roots, "<root>")?;
        if schema.leaves().is_empty() {
            return Err(ModelError::InvalidSchema("schema has no leaf".into()));
        }
        Ok(schema)
    }

    pub fn from_json_str(s: &str) -> Result<Self, ModelError> {
        serde_json::from_str(s).map_err(|e| ModelError::InvalidSchema(e.to_string()))
    }

    pub fn root(&self, name: &str) -> Option<&SchemaNode> {
        self.roots.iter().find(|n| n.name == name)
    }

    pub fn node(&self, path: &EntityPath) -> Option<&SchemaNode> {
        let mut parts = path.segments().iter();
        let mut node = self.root(parts.next()?)?;
        for p in parts {
            node = node.child(p)?;
        }
        Some(node)
    }

    pub fn leaves(&self) -> Vec<EntityPath> {
        fn walk(node: &SchemaNode, prefix: &[String], out: &mut Vec<EntityPath>) {
            let mut path = prefix.to_vec();
            path.push(node.name.clone());
            if node.is_leaf() {
                out.push(EntityPath::new(path).expect("validated names"));
            } else {
                for c in &node.children {
                    walk(c, &path, out);
                }
            }
        }
        let mut out = Vec::new();
        for r in &self.roots {
            walk(r, &[], &mut out);
        }
        out
    }

    /// The schema cut down to the named top-level entities, in schema
    /// order. The name gains a `+entities` suffix so fixture keys differ.
    pub fn restrict_roots(&self, names: &[&str]) -> Result<Self, ModelError> {
        if let Some(missing) = names.iter().find(|n| self.root(n).is_none()) {
            return Err(ModelError::InvalidSchema(format!("schema {} has no entity {missing:?}", self.name)));
        }
        let roots: Vec<SchemaNode> = self.roots.iter().filter(|r| names.contains(&r.name.as_str())).cloned().collect();
        let kept: Vec<&str> = roots.iter().map(|r| r.name.as_str()).collect();
        Self::new(format!("{}+{}", self.name, kept.join("+")), self.description.clone(), roots)
    }

    /// Indented plain-text description of the tree for prompts.
    pub fn describe(&self) -> String {
        fn walk(node: &SchemaNode, depth: usize, out: &mut String) {
            let kind = match (node.is_leaf(), node.repeatable) {
                (true, _) => "list of strings",
                (false, true) => "list of groups",
                (false, false) => "group",
            };
            out.push_str(&"  ".repeat(depth));
            out.push_str(&format!("- {} ({kind})", node.name));
            if !node.description.is_empty() {
                out.push_str(": ");
                out.push_str(&node.description);
            }
            out.push('\n');
            for c in &node.children {
                walk(c, depth + 1, out);
            }
        }
        let mut out = format!("Schema {}", self.name);
        if !self.description.is_empty() {
            out.push_str(&format!(" - {}", self.description));
        }
        out.push('\n');
        for r in &self.roots {
            walk(r, 0, &mut out);
        }
        out.trim_end().to_string()
    }
}
