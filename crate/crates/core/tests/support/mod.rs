pub mod hdbscan_oracle;
