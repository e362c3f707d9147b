"""Curated vocabulary behind the stub provider.

Each family lists the entities a domain of that kind tends to involve. The
lists already respect a middle granularity: ``Student`` rather than
``Person`` or ``MiddleSchoolStudent``.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class EntityEntry:
    name: str
    person: bool
    family: str
    match_attr: str
    categories: tuple[str, ...]
    measure: tuple[str, str, str]  # (name, value_type, range)
    noun: str  # relationship noun when this entity is a peripheral
    raw_key: str = ""  # primary key exactly as the provider first emits it


FAMILY_KEYWORDS: dict[str, tuple[str, ...]] = {
    "healthcare": ("health", "healthcare", "clinic", "medical", "hospital", "patient", "pharmacy", "care", "lab", "nursing", "dental", "telehealth", "wellness"),
    "travel": ("travel", "flight", "airline", "airport", "hotel", "tourism", "trip", "rail", "cruise", "aviation", "hospitality"),
    "finance": ("finance", "bank", "banking", "payment", "payments", "insurance", "loan", "credit", "invest", "fintech", "wealth"),
    "education": ("education", "school", "university", "course", "learning", "campus", "tutoring", "academic", "training"),
    "retail": ("retail", "shop", "shopping", "store", "commerce", "ecommerce", "grocery", "fashion", "marketplace"),
    "logistics": ("logistics", "shipping", "delivery", "freight", "warehouse", "supply", "courier", "postal"),
    "access": ("access", "building", "security", "facility", "office", "badge", "visitor"),
}

_E = EntityEntry
ENTITIES: tuple[EntityEntry, ...] = (
    _E("Patient", True, "healthcare", "insurance_tier", ("basic", "standard", "premium"), ("age", "integer", "18..90"), "Consultation"),
    _E("Doctor", True, "healthcare", "department", ("cardiology", "neurology", "pediatrics", "dermatology"), ("years_experience", "integer", "1..40"), "Appointment"),
    _E("Clinic", False, "healthcare", "service_line", ("primary_care", "urgent_care", "specialty"), ("capacity", "integer", "10..500"), "Visit"),
    _E("Medication", False, "healthcare", "dosage_form", ("tablet", "capsule", "liquid"), ("dosage_mg", "number", "1..1000"), "Prescription"),
    _E("LabTest", False, "healthcare", "sample_type", ("blood", "urine", "saliva"), ("turnaround_hours", "integer", "1..72"), "Order"),
    _E("LabEquipment", False, "healthcare", "equipment_class", ("imaging", "analyzer", "centrifuge"), ("weight_kg", "number", "5..900"), "Booking", raw_key="LabEquipmentID"),
    _E("Passenger", True, "travel", "loyalty_level", ("none", "silver", "gold"), ("age", "integer", "1..95"), "Companion"),
    _E("Flight", False, "travel", "cabin_class", ("economy", "business", "first"), ("seat_capacity", "integer", "50..400"), "Booking"),
    _E("Ticket", False, "travel", "fare_type", ("saver", "flex", "refundable"), ("price", "number", "40..2500"), "Purchase"),
    _E("Hotel", False, "travel", "room_type", ("single", "double", "suite"), ("star_rating", "integer", "1..5"), "Reservation"),
    _E("RentalCar", False, "travel", "vehicle_class", ("compact", "sedan", "suv"), ("daily_rate", "number", "20..300"), "Rental"),
    _E("Customer", True, "finance", "risk_profile", ("low", "medium", "high"), ("credit_score", "integer", "300..850"), "Referral"),
    _E("Account", False, "finance", "account_type", ("checking", "savings", "brokerage"), ("balance", "number", "0..100000"), "Transfer"),
    _E("Card", False, "finance", "card_network", ("visa", "mastercard", "amex"), ("credit_limit", "number", "500..50000"), "Activation"),
    _E("Merchant", False, "finance", "merchant_category", ("grocery", "travel", "electronics"), ("fee_rate", "number", "0..5"), "Payment"),
    _E("Student", True, "education", "grade_level", ("freshman", "sophomore", "junior", "senior"), ("age", "integer", "16..40"), "Pairing"),
    _E("Teacher", True, "education", "specialty", ("Math", "Physics"), ("years_experience", "integer", "1..40"), "Lesson"),
    _E("Course", False, "education", "delivery_mode", ("in_person", "online", "hybrid"), ("credits", "integer", "1..6"), "Enrollment"),
    _E("Classroom", False, "education", "room_kind", ("lecture", "lab", "seminar"), ("seats", "integer", "10..300"), "Reservation"),
    _E("Shopper", True, "retail", "membership", ("guest", "member", "vip"), ("age", "integer", "16..90"), "Referral"),
    _E("Product", False, "retail", "category", ("apparel", "electronics", "home"), ("unit_price", "number", "1..5000"), "Order"),
    _E("Store", False, "retail", "store_format", ("outlet", "flagship", "kiosk"), ("floor_area", "integer", "20..5000"), "Pickup"),
    _E("Courier", True, "logistics", "vehicle_type", ("bike", "van", "truck"), ("rating", "number", "1..5"), "Handoff"),
    _E("Parcel", False, "logistics", "size_class", ("small", "medium", "large"), ("weight_kg", "number", "0..70"), "Shipment"),
    _E("Warehouse", False, "logistics", "zone", ("north", "south", "east", "west"), ("capacity", "integer", "100..20000"), "Slot"),
    _E("Visitor", True, "access", "visitor_type", ("guest", "contractor", "vendor"), ("age", "integer", "16..90"), "Escort"),
    _E("Door", False, "access", "security_level", ("low", "medium", "high"), ("floor", "integer", "0..60"), "Access"),
    _E("Badge", False, "access", "badge_color", ("blue", "green", "red"), ("validity_days", "integer", "1..365"), "Issue"),
    _E("Employee", True, "general", "seniority", ("junior", "mid", "senior"), ("age", "integer", "18..70"), "Mentoring"),
    _E("Project", False, "general", "phase", ("planning", "active", "closing"), ("budget", "number", "1000..900000"), "Assignment"),
    _E("Device", False, "general", "platform", ("laptop", "phone", "tablet"), ("storage_gb", "integer", "32..2048"), "Checkout"),
)
BY_NAME = {e.name: e for e in ENTITIES}

FIRST_NAMES = (
    "Avery", "Blake", "Casey", "Devon", "Emery", "Finley", "Harper", "Jordan", "Kendall", "Logan",
    "Morgan", "Noel", "Oakley", "Parker", "Quinn", "Reese", "Rowan", "Sawyer", "Skyler", "Taylor",
)
LAST_NAMES = (
    "Abbott", "Barros", "Chen", "Dubois", "Eriksen", "Fischer", "Garza", "Haddad", "Ito", "Jensen",
    "Kowalski", "Lindqvist", "Moreau", "Nakamura", "Okafor", "Petrov", "Quist", "Rossi", "Silva", "Tanaka",
)
CITIES = (
    "Lisbon", "Osaka", "Denver", "Nairobi", "Tallinn", "Porto", "Quebec", "Austin", "Hobart", "Bergen",
    "Cusco", "Leeds", "Malmo", "Recife", "Tartu",
)
WORDS = (
    "amber", "birch", "cobalt", "delta", "ember", "fjord", "garnet", "harbor", "indigo", "juniper",
    "kestrel", "lumen", "meadow", "nimbus", "onyx", "prairie", "quartz", "raven", "sierra", "tundra",
)
NOTE_PHRASES = (
    "please call ahead", "first visit", "prefers morning", "bring documents", "follow-up",
    "needs accessibility support", "rescheduled once", "priority handling",
)

DOMAIN_MODIFIERS: dict[str, tuple[str, ...]] = {
    "horizontal": ("services", "network", "operations", "platform", "marketplace", "exchange", "hub"),
    "diagonal": ("compliance", "analytics", "payments", "support", "outreach", "procurement"),
    "temporal": ("scheduling", "renewals", "history", "forecasting", "reminders", "seasonal"),
    "hierarchical": ("regional", "enterprise", "local", "global", "community", "campus"),
    "role_based": ("staff", "admin", "members", "vendors", "partners", "volunteers"),
}
STRATEGIES = tuple(DOMAIN_MODIFIERS)


def family_of(label: str) -> str:
    # the leading term names the domain; later terms only qualify it
    for term in label.split("_"):
        for fam, keys in FAMILY_KEYWORDS.items():
            if term in keys:
                return fam
    return "general"


def families_of(labels: list[str]) -> list[str]:
    seen: list[str] = []
    for label in labels:
        fam = family_of(label)
        if fam not in seen:
            seen.append(fam)
    return seen
