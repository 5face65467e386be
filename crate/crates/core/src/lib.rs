pub mod graph;
pub mod nn;
pub mod tensor;
pub mod corpus;
pub mod treelib;
pub mod onlstm;
pub mod img2tree;
pub mod treeenc;
pub mod metrics;
pub mod generator;
pub mod retrieval;
pub mod checkpoint;
