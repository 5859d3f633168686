#include "coverid/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "coverid/tensor.hpp"

namespace coverid {

std::vector<ManifestEntry> DatasetManifest::split(const std::string& name) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
        if (e.split == name) out.push_back(e);
    return out;
}

std::map<std::string, std::string> DatasetManifest::clique_labels() const {
    std::map<std::string, std::string> out;
    for (const auto& e : entries) out[e.id] = e.clique;
    return out;
}

void write_manifest(const std::string& path, const DatasetManifest& manifest) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_manifest: cannot open " + path);
    for (const auto& e : manifest.entries) {
        nlohmann::json j{{"id", e.id}, {"feature", e.feature}, {"clique", e.clique},
                         {"split", e.split}};
        f << j.dump() << "\n";
    }
}

DatasetManifest read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("read_manifest: cannot open " + path);
    DatasetManifest m;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error("read_manifest: bad JSON at " + path + ":" +
                                     std::to_string(lineno) + ": " + e.what());
        }
        ManifestEntry e;
        e.id = j.at("id").get<std::string>();
        e.feature = j.at("feature").get<std::string>();
        e.clique = j.at("clique").get<std::string>();
        e.split = j.at("split").get<std::string>();
        if (e.split != "train" && e.split != "val" && e.split != "test")
            throw std::runtime_error("read_manifest: unknown split '" + e.split + "' at " +
                                     path + ":" + std::to_string(lineno));
        m.entries.push_back(std::move(e));
    }
    return m;
}

std::vector<size_t> LabeledDataset::split_indices(const std::string& name) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < entries.size(); ++i)
        if (entries[i].split == name) out.push_back(i);
    return out;
}

LabeledDataset label_dataset(const DatasetManifest& manifest) {
    std::set<std::string> cliques;
    for (const auto& e : manifest.entries) cliques.insert(e.clique);
    LabeledDataset ds;
    ds.clique_names.assign(cliques.begin(), cliques.end());
    for (const auto& e : manifest.entries) {
        LabeledDataset::Entry le;
        le.id = e.id;
        le.feature = e.feature;
        le.split = e.split;
        le.clique_index = static_cast<int>(
            std::lower_bound(ds.clique_names.begin(), ds.clique_names.end(), e.clique) -
            ds.clique_names.begin());
        ds.entries.push_back(std::move(le));
    }
    return ds;
}

}  // namespace coverid
