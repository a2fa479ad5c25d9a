//! Model-based planning for symbolic Alchemy: the latent-chemistry
//! environment, a tree-search planner with chance nodes, and dynamics
//! models it can plan over.

pub mod env;

pub mod model;
pub mod planner;
pub mod dataset;
pub mod harness;
pub mod cli;
