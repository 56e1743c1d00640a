pub mod actuator_net;
pub mod config;
pub mod experiments;
pub mod hydraulic_plant;
pub mod jacobian_ctrl;
pub mod machine_model;
pub mod neural;
pub mod ppo;
pub mod service;
pub mod sim_env;
