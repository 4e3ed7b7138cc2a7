//! JSON Schemas of the emitted reports.

use serde_json::{json, Value};

use crate::Command;

const DRAFT: &str = "https://json-schema.org/draft/2020-12/schema";

pub fn convergence_report() -> Value {
    json!({
        "$schema": DRAFT,
        "title": "ConvergenceReport",
        "type": "object",
        "required": ["levels", "slope", "slope_se", "metadata"],
        "properties": {
            "levels": {
                "type": "array",
                "minItems": 4,
                "items": {
                    "type": "object",
                    "required": ["level", "error", "stderr", "n_samples"],
                    "properties": {
                        "level": { "type": "number", "exclusiveMinimum": 0 },
                        "error": { "type": "number", "exclusiveMinimum": 0 },
                        "stderr": { "type": "number", "minimum": 0 },
                        "n_samples": { "type": "integer", "minimum": 0 }
                    }
                }
            },
            "slope": { "type": "number" },
            "slope_se": { "type": "number", "minimum": 0 },
            "metadata": { "type": "object" }
        }
    })
}

fn extended() -> Value {
    json!({ "oneOf": [{ "type": "number" }, { "enum": ["inf", "-inf"] }] })
}

pub fn regularity_budget() -> Value {
    json!({
        "$schema": DRAFT,
        "title": "RegularityBudget",
        "type": "object",
        "required": ["beta_sup", "rho_sup", "alpha", "zeta", "chi", "rate_sup", "method", "diagnostics"],
        "properties": {
            "beta_sup": extended(),
            "rho_sup": extended(),
            "alpha": extended(),
            "zeta": { "type": "number" },
            "chi": { "type": "number" },
            "rate_sup": extended(),
            "method": { "enum": ["analytic", "probe"] },
            "diagnostics": { "type": "array", "items": { "type": "string" } }
        }
    })
}

pub fn oracle_report() -> Value {
    json!({
        "$schema": DRAFT,
        "title": "OracleReport",
        "type": "object",
        "required": ["modes", "grid_points", "comparisons", "max_rel_deviation", "passed"],
        "properties": {
            "modes": { "type": "integer" },
            "grid_points": { "type": "integer" },
            "comparisons": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["name", "max_rel_deviation", "tolerance", "passed"],
                    "properties": {
                        "name": { "type": "string" },
                        "max_rel_deviation": { "type": "number", "minimum": 0 },
                        "tolerance": { "type": "number" },
                        "passed": { "type": "boolean" }
                    }
                }
            },
            "max_rel_deviation": { "type": "number", "minimum": 0 },
            "passed": { "type": "boolean" }
        }
    })
}

pub fn path_ensemble() -> Value {
    json!({
        "$schema": DRAFT,
        "title": "PathEnsemble",
        "type": "object",
        "required": ["frame", "seed", "t", "paths"],
        "properties": {
            "frame": { "enum": ["spectral", "nodal"] },
            "seed": { "type": "integer" },
            "t": { "type": "array", "items": { "type": "number" } },
            "paths": {
                "description": "samples x grid points x coefficients (or nodes)",
                "type": "array",
                "items": { "type": "array", "items": { "type": "array", "items": { "type": "number" } } }
            }
        }
    })
}

pub fn for_command(command: &Command) -> Value {
    match command {
        Command::ConvergeSpectral(_) | Command::ConvergeFem(_) => convergence_report(),
        Command::OracleCheck(_) => oracle_report(),
        Command::CheckAssumptions(_) => regularity_budget(),
        Command::SampleForward(_) | Command::SampleBridge(_) | Command::SampleFemBridge(_) => path_ensemble(),
    }
}
