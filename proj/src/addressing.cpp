#include "fmesh/addressing.hpp"

#include <cmath>
#include <sstream>

namespace fmesh {

double TopologyParams::address_space() const {
  return std::pow(static_cast<double>(group_size), static_cast<double>(levels));
}

Address::Address(std::vector<int> components, const TopologyParams& params) {
  if (!params.valid()) throw AddressError("invalid topology params");
  if (static_cast<int>(components.size()) != params.levels)
    throw AddressError("address has " + std::to_string(components.size()) +
                       " components, expected " + std::to_string(params.levels));
  for (int c : components) {
    if (c < 0 || c >= params.group_size)
      throw AddressError("address component " + std::to_string(c) +
                         " out of range [0," + std::to_string(params.group_size - 1) + "]");
  }
  comps_ = std::move(components);
}

int Address::component(int level) const {
  if (level < 0 || level >= levels())
    throw AddressError("component level " + std::to_string(level) + " out of range");
  return comps_[static_cast<size_t>(level)];
}

std::string Address::str() const {
  std::ostringstream out;
  for (int i = levels() - 1; i >= 0; --i) {
    out << comps_[static_cast<size_t>(i)];
    if (i > 0) out << '.';
  }
  return out.str();
}

bool Address::same_gnode_above(const Address& other, int level) const {
  if (levels() != other.levels()) return false;
  for (int l = level + 1; l < levels(); ++l)
    if (comps_[static_cast<size_t>(l)] != other.comps_[static_cast<size_t>(l)]) return false;
  return true;
}

Address Address::gnode_prefix(int level) const {
  Address out = *this;
  for (int l = 0; l < level && l < out.levels(); ++l) out.comps_[static_cast<size_t>(l)] = 0;
  return out;
}

std::strong_ordering Address::operator<=>(const Address& other) const {
  // Compare highest level first so ordering matches the dotted text form.
  if (auto c = levels() <=> other.levels(); c != 0) return c;
  for (int l = levels() - 1; l >= 0; --l) {
    if (auto c = comps_[static_cast<size_t>(l)] <=> other.comps_[static_cast<size_t>(l)]; c != 0)
      return c;
  }
  return std::strong_ordering::equal;
}

Address parse_address(std::string_view text, const TopologyParams& params) {
  std::vector<int> highest_first;
  size_t pos = 0;
  if (text.empty()) throw AddressError("empty address");
  while (pos <= text.size()) {
    size_t dot = text.find('.', pos);
    std::string_view part =
        text.substr(pos, dot == std::string_view::npos ? std::string_view::npos : dot - pos);
    if (part.empty()) throw AddressError("empty component in address '" + std::string(text) + "'");
    int value = 0;
    for (char ch : part) {
      if (ch < '0' || ch > '9')
        throw AddressError("non-numeric component in address '" + std::string(text) + "'");
      value = value * 10 + (ch - '0');
      if (value > 1'000'000) throw AddressError("component overflow in '" + std::string(text) + "'");
    }
    highest_first.push_back(value);
    if (dot == std::string_view::npos) break;
    pos = dot + 1;
  }
  std::vector<int> comps(highest_first.rbegin(), highest_first.rend());
  return Address(std::move(comps), params);
}

std::string format_address(const Address& addr) { return addr.str(); }

int gnode_id_at(const Address& addr, int level, const TopologyParams& params) {
  if (level < 0 || level >= params.levels)
    throw AddressError("gnode level " + std::to_string(level) + " out of range");
  return addr.component(level);
}

std::optional<int> divergence_level(const Address& a, const Address& b) {
  if (a.levels() != b.levels())
    throw AddressError("divergence_level on addresses of different depth");
  for (int l = a.levels() - 1; l >= 0; --l)
    if (a.component(l) != b.component(l)) return l;
  return std::nullopt;  // same node
}

}  // namespace fmesh
