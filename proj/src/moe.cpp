#include "optimus/moe.hpp"

#include <nlohmann/json.hpp>

namespace optimus {

namespace {

nlohmann::json int_tensor_json(const TensorI& t) {
    nlohmann::json arr = nlohmann::json::array();
    for (int64_t i = 0; i < t.numel(); ++i) arr.push_back(t.data()[i]);
    return arr;
}

}  // namespace

std::string routing_artifacts_json(const RoutingArtifacts& art) {
    nlohmann::json j;
    j["t_total"] = art.t_total;
    j["th"] = art.th;
    j["rt"] = art.rt;
    j["token_counts"] = int_tensor_json(art.token_counts);
    j["partial_token_counts"] = int_tensor_json(art.partial_token_counts);
    j["partial_cum"] = int_tensor_json(art.partial_cum);
    j["cum_token_counts"] = int_tensor_json(art.cum_token_counts);
    j["expert_counts"] = int_tensor_json(art.expert_counts);
    j["cum_expert_counts"] = int_tensor_json(art.cum_expert_counts);
    j["input_indices"] = int_tensor_json(art.input_indices);
    j["output_indices"] = int_tensor_json(art.output_indices);
    j["selected_k"] = int_tensor_json(art.selected_k);
    return j.dump(2);
}

}  // namespace optimus
