#ifndef COVERID_DATASET_HPP
#define COVERID_DATASET_HPP

#include <map>
#include <string>
#include <vector>

namespace coverid {

struct ManifestEntry {
    std::string id;
    std::string feature;  // path to .cqt file
    std::string clique;
    std::string split;    // "train" | "val" | "test"
};

// JSON-lines manifest, one object per recording.
struct DatasetManifest {
    std::vector<ManifestEntry> entries;

    std::vector<ManifestEntry> split(const std::string& name) const;
    std::map<std::string, std::string> clique_labels() const;
};

void write_manifest(const std::string& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::string& path);

// Clique-indexed view used by training: clique strings of the whole
// manifest mapped to dense indices in [0, C) by sorted order.
struct LabeledDataset {
    struct Entry {
        std::string id;
        std::string feature;
        int clique_index = 0;
        std::string split;
    };
    std::vector<Entry> entries;
    std::vector<std::string> clique_names;  // index -> name

    size_t num_classes() const { return clique_names.size(); }
    std::vector<size_t> split_indices(const std::string& name) const;
};

LabeledDataset label_dataset(const DatasetManifest& manifest);

}  // namespace coverid

#endif
