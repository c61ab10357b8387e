#include "caan/poolheads.hpp"

namespace caan::heads {

HeadKind head_from_string(const std::string& s) {
    if (s == "flatten") return HeadKind::flatten;
    if (s == "max") return HeadKind::max;
    if (s == "avg") return HeadKind::avg;
    if (s == "roi") return HeadKind::roi;
    if (s == "att") return HeadKind::att;
    if (s == "roi_att") return HeadKind::roi_att;
    throw config_error("unknown head '" + s + "' (flatten|max|avg|roi|att|roi_att)");
}

std::string head_to_string(HeadKind k) {
    switch (k) {
        case HeadKind::flatten: return "flatten";
        case HeadKind::max: return "max";
        case HeadKind::avg: return "avg";
        case HeadKind::roi: return "roi";
        case HeadKind::att: return "att";
        case HeadKind::roi_att: return "roi_att";
    }
    return "?";
}

bool head_uses_attention(HeadKind k) { return k == HeadKind::att || k == HeadKind::roi_att; }

}  // namespace caan::heads
