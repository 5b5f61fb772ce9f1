//! LaneRCNN-style motion forecasting on lane graphs.

pub mod autodiff;
pub mod decode;
pub mod geometry;
pub mod graph_ops;
pub mod lane_graph;
pub mod laneroi;
pub mod model;
pub mod scene;
pub mod train_eval;
