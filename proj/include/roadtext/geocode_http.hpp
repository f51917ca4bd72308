#pragma once

#include <semaphore>
#include <string>

#include <httplib.h>
// glibc resolv.h (pulled in by httplib) leaks a _res macro that mangles
// parameter names in unrelated headers
#ifdef _res
#undef _res
#endif
#include <nlohmann/json.hpp>

#include "roadtext/geocode.hpp"

namespace roadtext {

/// HTTP fallback speaking GET /intersection?street_a=&street_b=&borough=
/// returning {"lat":..,"lon":..}. street_b is empty for single-street
/// lookups. In-flight requests are capped; timeouts and transport failures
/// come back as unresolved, never as exceptions.
class HttpGeocoderClient : public GeocoderClient {
  public:
    HttpGeocoderClient(std::string host, int port, int max_in_flight = 8,
                       int timeout_seconds = 5)
        : host_(std::move(host)), port_(port), timeout_seconds_(timeout_seconds),
          slots_(max_in_flight > 0 ? max_in_flight : 1) {}

    std::optional<GeoPoint> lookup(const std::string& street_a, const std::string& street_b,
                                   const std::string& borough,
                                   std::string* transport_error) override {
        slots_.acquire();
        struct Release {
            std::counting_semaphore<>& s;
            ~Release() { s.release(); }
        } release{slots_};

        httplib::Client client(host_, port_);
        client.set_connection_timeout(timeout_seconds_, 0);
        client.set_read_timeout(timeout_seconds_, 0);
        std::string path = "/intersection?street_a=" + url_encode(street_a) +
                           "&street_b=" + url_encode(street_b) +
                           "&borough=" + url_encode(borough);
        auto res = client.Get(path);
        if (!res) {
            if (transport_error) *transport_error = httplib::to_string(res.error());
            return std::nullopt;
        }
        if (res->status != 200) return std::nullopt;
        auto j = nlohmann::json::parse(res->body, nullptr, false);
        if (j.is_discarded() || !j.contains("lat") || !j.contains("lon")) {
            if (transport_error) *transport_error = "malformed geocoder response";
            return std::nullopt;
        }
        double lat = j["lat"].get<double>(), lon = j["lon"].get<double>();
        if (!detail::valid_geo(lat, lon)) {
            if (transport_error) *transport_error = "geocoder returned out-of-range coordinate";
            return std::nullopt;
        }
        return GeoPoint{lat, lon};
    }

    static std::string url_encode(const std::string& s) {
        static const char* hex = "0123456789ABCDEF";
        std::string out;
        for (unsigned char c : s) {
            if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
                out += static_cast<char>(c);
            } else {
                out += '%';
                out += hex[c >> 4];
                out += hex[c & 15];
            }
        }
        return out;
    }

  private:
    std::string host_;
    int port_;
    int timeout_seconds_;
    std::counting_semaphore<> slots_;
};

}  // namespace roadtext
