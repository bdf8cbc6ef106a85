#include "dfformer/model.hpp"

#include <fstream>

#include <json.hpp>

namespace dff {

using nlohmann::json;

ModelConfig load_model_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw std::runtime_error("cannot open model config " + path.string());
    }
    json j = json::parse(is);
    ModelConfig c = ModelConfig::table1();
    if (j.contains("mixer_kind")) {
        c.mixer_kind = parse_mixer_kind(j["mixer_kind"]);
    }
    c.mixer_depthwise = j.value("mixer_depthwise", false);
    c.num_classes = j.value("num_classes", 2);
    c.input_channels = j.value("input_channels", 3);
    if (j.contains("stages")) {
        c.stages.clear();
        for (const auto& sj : j["stages"]) {
            StageConfig st;
            st.patch_kernel = sj.at("patch_kernel");
            st.patch_stride = sj.at("patch_stride");
            st.channels = sj.at("channels");
            st.mixer_kernel = sj.value("mixer_kernel", 3);
            st.mlp_ratio = sj.value("mlp_ratio", 4);
            st.depth = sj.at("depth");
            c.stages.push_back(st);
        }
    }
    c.validate();
    return c;
}

std::string model_config_to_json(const ModelConfig& c) {
    json j;
    j["mixer_kind"] = to_string(c.mixer_kind);
    j["mixer_depthwise"] = c.mixer_depthwise;
    j["num_classes"] = c.num_classes;
    j["input_channels"] = c.input_channels;
    json stages = json::array();
    for (const auto& st : c.stages) {
        stages.push_back({{"patch_kernel", st.patch_kernel},
                          {"patch_stride", st.patch_stride},
                          {"channels", st.channels},
                          {"mixer_kernel", st.mixer_kernel},
                          {"mlp_ratio", st.mlp_ratio},
                          {"depth", st.depth}});
    }
    j["stages"] = std::move(stages);
    return j.dump(2);
}

}  // namespace dff
