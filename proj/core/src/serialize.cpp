#include "dfformer/serialize.hpp"

#include <cstdio>
#include <fstream>
#include <map>

#include <json.hpp>

namespace dff {

using nlohmann::json;

namespace {

std::string blob_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "p%05zu.dft", i);
    return buf;
}

}  // namespace

template <class T>
void save_checkpoint(const std::vector<ParamRef<T>>& params, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json index;
    index["format"] = "dfformer.checkpoint.v1";
    json plist = json::array();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const ParamRef<T>& p = params[i];
        Tensor<T> flat(1, 1, 1, p.size);
        std::copy(p.data, p.data + p.size, flat.data.begin());
        const std::string file = blob_name(i);
        write_tensor_file(dir / file, flat);
        plist.push_back({{"name", p.name}, {"file", file}, {"count", p.size}});
    }
    index["params"] = std::move(plist);
    std::ofstream os(dir / "index.json");
    if (!os) {
        throw std::runtime_error("cannot write checkpoint index in " + dir.string());
    }
    os << index.dump(2) << "\n";
}

template <class T>
void load_checkpoint(const std::vector<ParamRef<T>>& params, const std::filesystem::path& dir) {
    std::ifstream is(dir / "index.json");
    if (!is) {
        throw std::runtime_error("cannot open checkpoint index in " + dir.string());
    }
    json index = json::parse(is);
    std::map<std::string, std::pair<std::string, std::int64_t>> by_name;
    for (const auto& e : index.at("params")) {
        by_name[e.at("name")] = {e.at("file"), e.at("count")};
    }
    for (const ParamRef<T>& p : params) {
        const auto it = by_name.find(p.name);
        if (it == by_name.end()) {
            throw std::runtime_error("checkpoint is missing parameter '" + p.name + "'");
        }
        if (it->second.second != p.size) {
            throw std::runtime_error("checkpoint parameter '" + p.name + "' has " +
                                     std::to_string(it->second.second) + " values, model expects " +
                                     std::to_string(p.size));
        }
        Tensor<T> flat = read_tensor_file<T>(dir / it->second.first);
        if (flat.size() != p.size) {
            throw std::runtime_error("checkpoint blob size mismatch for '" + p.name + "'");
        }
        std::copy(flat.data.begin(), flat.data.end(), p.data);
    }
}

template void save_checkpoint<float>(const std::vector<ParamRef<float>>&,
                                     const std::filesystem::path&);
template void save_checkpoint<double>(const std::vector<ParamRef<double>>&,
                                      const std::filesystem::path&);
template void load_checkpoint<float>(const std::vector<ParamRef<float>>&,
                                     const std::filesystem::path&);
template void load_checkpoint<double>(const std::vector<ParamRef<double>>&,
                                      const std::filesystem::path&);

}  // namespace dff
