#pragma once

// Strict JSON object reading: every key must be consumed, types are checked,
// and errors carry the JSON path of the offending value.

#include "errors.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <set>
#include <string>
#include <vector>

namespace battn {

using Json = nlohmann::ordered_json;

class StrictObject {
public:
    StrictObject(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) {
            throw ConfigError(path_ + ": expected a JSON object");
        }
    }

    [[nodiscard]] bool has(const std::string& key) const { return obj_.contains(key); }

    template <typename T>
    T get(const std::string& key) {
        if (!obj_.contains(key)) {
            throw ConfigError(path_ + "." + key + ": required field missing");
        }
        return convert<T>(key);
    }

    template <typename T>
    T get_or(const std::string& key, T fallback) {
        if (!obj_.contains(key) || obj_.at(key).is_null()) {
            seen_.insert(key);
            return fallback;
        }
        return convert<T>(key);
    }

    template <typename T>
    std::optional<T> get_optional(const std::string& key) {
        if (!obj_.contains(key) || obj_.at(key).is_null()) {
            seen_.insert(key);
            return std::nullopt;
        }
        return convert<T>(key);
    }

    const Json& raw(const std::string& key) {
        if (!obj_.contains(key)) {
            throw ConfigError(path_ + "." + key + ": required field missing");
        }
        seen_.insert(key);
        return obj_.at(key);
    }

    [[nodiscard]] std::string child_path(const std::string& key) const { return path_ + "." + key; }

    /// Rejects any key that was never read.
    void finish() const {
        for (const auto& item : obj_.items()) {
            if (!seen_.contains(item.key())) {
                throw ConfigError(path_ + "." + item.key() + ": unknown field");
            }
        }
    }

private:
    template <typename T>
    T convert(const std::string& key) {
        seen_.insert(key);
        const Json& v = obj_.at(key);
        const std::string where = path_ + "." + key;
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
            return v.get<bool>();
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
            if constexpr (std::is_unsigned_v<T>) {
                if (v.is_number_unsigned()) return v.get<T>();
                if (v.get<long long>() < 0) throw ConfigError(where + ": expected a non-negative integer");
            }
            return v.get<T>();
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError(where + ": expected a number");
            return v.get<T>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError(where + ": expected a string");
            return v.get<std::string>();
        } else if constexpr (std::is_same_v<T, std::vector<int>> || std::is_same_v<T, std::vector<long>>) {
            if (!v.is_array()) throw ConfigError(where + ": expected an array of integers");
            T out;
            for (std::size_t k = 0; k < v.size(); ++k) {
                if (!v[k].is_number_integer()) {
                    throw ConfigError(where + "[" + std::to_string(k) + "]: expected an integer");
                }
                out.push_back(v[k].get<typename T::value_type>());
            }
            return out;
        } else if constexpr (std::is_same_v<T, std::vector<double>>) {
            if (!v.is_array()) throw ConfigError(where + ": expected an array of numbers");
            T out;
            for (std::size_t k = 0; k < v.size(); ++k) {
                if (!v[k].is_number()) {
                    throw ConfigError(where + "[" + std::to_string(k) + "]: expected a number");
                }
                out.push_back(v[k].get<double>());
            }
            return out;
        } else {
            static_assert(sizeof(T) == 0, "unsupported field type");
        }
    }

    const Json& obj_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace battn
