//! Built-in example bundles: a spec, its data or generator settings, and the
//! trace summary a virtual-time run is expected to produce.

use std::path::Path;

pub struct Bundle {
    pub name: &'static str,
    pub description: &'static str,
    /// File name and contents.
    pub files: &'static [(&'static str, &'static str)],
}

impl Bundle {
    pub fn file(&self, name: &str) -> Option<&'static str> {
        self.files.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
    }

    pub fn has_generator(&self) -> bool {
        self.file("generator.json").is_some()
    }

    pub fn export(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, contents) in self.files {
            std::fs::write(dir.join(name), contents)?;
        }
        Ok(())
    }
}

macro_rules! bundle_files {
    ($dir:literal: $($file:literal),+) => {
        &[$(($file, include_str!(concat!("../gallery/", $dir, "/", $file)))),+]
    };
}

pub static BUNDLES: &[Bundle] = &[
    Bundle {
        name: "density_data_chunking",
        description: "binned density of 10,000 points; random data chunks of 500 every 250 ms",
        files: bundle_files!("density_data_chunking": "spec.json", "data.csv", "expected_summary.json"),
    },
    Bundle {
        name: "kmeans_process",
        description: "k-means (k=5) on 5,000 ring points; one iteration every 125 ms",
        files: bundle_files!("kmeans_process": "spec.json", "data.csv", "expected_summary.json"),
    },
    Bundle {
        name: "kmeans_mixed",
        description: "k-means (k=5) while 5,000 points arrive 100 at a time every 500 ms",
        files: bundle_files!("kmeans_mixed": "spec.json", "data.csv", "expected_summary.json"),
    },
    Bundle {
        name: "backend_demo",
        description: "taxi pickups from a fake generator; acknowledged batches every 330 ms",
        files: bundle_files!("backend_demo": "spec.json", "generator.json", "expected_summary.json"),
    },
];

pub fn find(name: &str) -> Option<&'static Bundle> {
    BUNDLES.iter().find(|b| b.name == name)
}
